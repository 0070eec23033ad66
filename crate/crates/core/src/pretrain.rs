//! Distillation objective and the pretraining loop.
//!
//! ```text
//! L_sem    = (1/N) Σ_i ‖y_text,i − ŷ_sem,i‖²
//! L_acoust = (1/V) Σ_{i,j valid} ‖y_pase,ij − ŷ_acoust,ij‖²     V = valid frame count
//! L_tot    = L_sem + λ·L_acoust
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{write_atomic, Checkpoint, META_PREFIX};
use crate::config::Config;
use crate::data::{batch_iterator, derive_seed, ManifestEntry};
use crate::error::{Error, Result};
use crate::frontend::{crop_or_pad, frame_count, CropMode, Cropped, Waveform, DOWNSTREAM_MAX_SECONDS};
use crate::model::{CareModel, ModelConfig};
use crate::teachers::{downsample_targets, AcousticTeacher, SemanticTeacher};
use crate::tensor::{AdamW, AdamWConfig, Binder, Graph, Real, Tensor, Var};

const CURVE_TENSOR: &str = "meta.losses";

/// `(1/N) Σ ‖target − pred‖²` over rows of `N × D` inputs (a rank-1 input is one row).
pub fn semantic_loss<T: Real>(g: &mut Graph<T>, target: Var, pred: Var) -> Result<Var> {
    let n = match g.shape(pred) {
        [_] => 1,
        [n, _] => *n,
        s => {
            return Err(Error::Shape {
                op: "semantic_loss",
                lhs: s.to_vec(),
                rhs: g.shape(target).to_vec(),
            })
        }
    };
    let diff = g.sub(target, pred)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, T::lit(1.0 / n as f64))
}

/// Squared frame error summed over valid rows of `M × D` inputs, divided by the valid count.
pub fn acoustic_loss<T: Real>(g: &mut Graph<T>, target: Var, pred: Var, valid: &[bool]) -> Result<Var> {
    let rows = g.shape(pred).first().copied().unwrap_or(0);
    if g.shape(pred).len() != 2 || valid.len() != rows {
        return Err(Error::Shape {
            op: "acoustic_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: vec![valid.len()],
        });
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Input("acoustic loss over zero valid frames".into()));
    }
    let diff = g.sub(target, pred)?;
    let mut sq = g.mul(diff, diff)?;
    if count < rows {
        let keep = valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        sq = g.row_scale(sq, keep)?;
    }
    let total = g.sum(sq)?;
    g.scale(total, T::lit(1.0 / count as f64))
}

/// `L_sem + λ·L_acoust`; with λ = 0 the acoustic term is left off the tape entirely.
pub fn total_loss<T: Real>(g: &mut Graph<T>, semantic: Var, acoustic: Var, lambda: f64) -> Result<Var> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(semantic);
    }
    let weighted = if lambda == 1.0 { acoustic } else { g.scale(acoustic, T::lit(lambda))? };
    g.add(semantic, weighted)
}

/// Both stand-in teachers sized for a model configuration.
#[derive(Clone, Debug)]
pub struct Teachers {
    pub semantic: SemanticTeacher,
    pub acoustic: AcousticTeacher,
}

impl Teachers {
    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        let d = config.semantic_dim;
        let heads = if d % config.heads == 0 { config.heads } else { 1 };
        Ok(Self {
            semantic: SemanticTeacher::new(d, heads)?,
            acoustic: AcousticTeacher::new(config.acoustic_dim)?,
        })
    }

    /// Acoustic targets at the encoder frame rate, `min(T, rows/2) × D_a`.
    pub fn acoustic_targets(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        downsample_targets(&self.acoustic.lld(samples)?, frame_count(samples.len()))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub cropped: Cropped,
    pub y_text: Vec<f32>,
    pub y_pase: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub items: Vec<PretrainItem>,
}

/// One loaded utterance with its (crop-independent) semantic target.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub waveform: Waveform,
    pub y_text: Vec<f32>,
}

/// Loads every entry, failing with the full list of ids that could not be read.
pub fn load_utterances(entries: &[ManifestEntry], teachers: &Teachers) -> Result<Vec<Utterance>> {
    if entries.is_empty() {
        return Err(Error::Input("pretraining manifest is empty".into()));
    }
    let mut out = Vec::with_capacity(entries.len());
    let mut failed = Vec::new();
    for e in entries {
        match e.load_audio() {
            Ok(waveform) => out.push(Utterance {
                id: e.id.clone(),
                waveform,
                y_text: teachers.semantic.embed_text(&e.resolved_transcript())?,
            }),
            Err(err) => failed.push(format!("{} ({err})", e.id)),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Input(format!("unreadable manifest entries: {}", failed.join("; "))));
    }
    Ok(out)
}

/// Crops and targets for `indices`; crop offsets depend only on `(seed, step, slot)`.
pub fn assemble_batch(
    data: &[Utterance],
    indices: &[usize],
    teachers: &Teachers,
    crop_seconds: f64,
    seed: u64,
    step: u64,
) -> Result<PretrainBatch> {
    let step_seed = derive_seed(seed, step);
    let items = indices
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let u = &data[i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, slot as u64));
            let cropped = crop_or_pad(&u.waveform, crop_seconds, &mut rng, CropMode::Pretrain)?;
            let y_pase = teachers.acoustic_targets(cropped.waveform.samples())?;
            Ok(PretrainItem {
                cropped,
                y_text: u.y_text.clone(),
                y_pase,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainBatch { items })
}

/// Utterance indices for 0-based `step`: epochs advance every `ceil(n / batch)` steps.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    let per_epoch = n.div_ceil(batch.max(1)) as u64;
    let batches = batch_iterator(n, batch, derive_seed(seed, u64::MAX), step / per_epoch)?;
    Ok(batches[(step % per_epoch) as usize].clone())
}

/// Graph handles for the three losses of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub semantic: Var,
    pub acoustic: Var,
    pub total: Var,
}

/// Forward pass of the whole batch on one tape.
pub fn batch_loss<T: Real>(
    model: &CareModel<T>,
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    batch: &PretrainBatch,
    lambda: f64,
) -> Result<LossVars> {
    if batch.items.is_empty() {
        return Err(Error::Input("empty pretraining batch".into()));
    }
    let mut sem_pred = Vec::new();
    let mut sem_target = Vec::new();
    let mut ac_pred = Vec::new();
    let mut ac_target = Vec::new();
    let mut ac_valid = Vec::new();
    for item in &batch.items {
        let samples = item.cropped.waveform.samples();
        let (out, valid) = model.forward(g, b, samples, item.cropped.valid_samples)?;
        sem_pred.push(out.semantic_pooled);
        let y = item.y_text.iter().map(|&v| T::lit(v as f64)).collect();
        sem_target.push(g.constant(Tensor::vector(y)));

        let rows = item.y_pase.rows();
        let pred = if rows < valid.len() {
            g.slice_rows(out.acoustic_pred, 0, rows)?
        } else {
            out.acoustic_pred
        };
        ac_pred.push(pred);
        ac_target.push(g.constant(item.y_pase.cast()));
        ac_valid.extend_from_slice(&valid[..rows]);
    }
    let sp = g.stack(&sem_pred)?;
    let st = g.stack(&sem_target)?;
    let semantic = semantic_loss(g, st, sp)?;

    let (pred, target) = if ac_pred.len() == 1 {
        (ac_pred[0], ac_target[0])
    } else {
        let rows = ac_valid.len();
        let d = g.shape(ac_pred[0])[1];
        let p = g.stack(&ac_pred)?;
        let t = g.stack(&ac_target)?;
        (g.reshape(p, &[rows, d])?, g.reshape(t, &[rows, d])?)
    };
    let acoustic = acoustic_loss(g, target, pred, &ac_valid)?;
    let total = total_loss(g, semantic, acoustic, lambda)?;
    Ok(LossVars {
        semantic,
        acoustic,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_sem: f32,
    pub l_acoust: f32,
    pub l_tot: f32,
    pub grad_norm: f64,
}

/// Forward, backward and one optimizer update. A non-finite loss or gradient
/// aborts before any state changes.
pub fn pretrain_step(
    model: &mut CareModel,
    optimizer: &mut AdamW<f32>,
    batch: &PretrainBatch,
    lambda: f64,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store);
    let loss = batch_loss(model, &mut g, &mut b, batch, lambda)?;
    let (l_sem, l_acoust, l_tot) = (
        g.value(loss.semantic).item(),
        g.value(loss.acoustic).item(),
        g.value(loss.total).item(),
    );
    if !(l_sem.is_finite() && l_acoust.is_finite() && l_tot.is_finite()) {
        return Err(Error::NonFinite(format!(
            "step {} aborted: l_sem {l_sem}, l_acoust {l_acoust}, l_tot {l_tot}",
            optimizer.step_count() + 1
        )));
    }
    g.backward(loss.total)?;
    let grads = b.gradients(&g);
    if let Some(name) = grads.first_non_finite(&model.store) {
        return Err(Error::NonFinite(format!(
            "step {} aborted: gradient of `{name}` is not finite",
            optimizer.step_count() + 1
        )));
    }
    let grad_norm = grads.global_norm();
    optimizer.step(&mut model.store, &grads)?;
    Ok(StepReport {
        step: optimizer.step_count(),
        l_sem,
        l_acoust,
        l_tot,
        grad_norm,
    })
}

pub fn adamw_config(config: &Config) -> AdamWConfig {
    AdamWConfig {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Training state: model, optimizer, loaded corpus and the loss curve so far.
pub struct Pretrainer {
    pub config: Config,
    pub model: CareModel,
    pub optimizer: AdamW<f32>,
    /// `(l_sem, l_acoust, l_tot)` for steps `1..=len`.
    pub curve: Vec<[f32; 3]>,
    pub teachers: Teachers,
    pub data: Vec<Utterance>,
}

impl Pretrainer {
    /// Fresh run: random init from the pretraining seed, or a warm start when
    /// the config names a checkpoint.
    pub fn new(config: &Config, entries: &[ManifestEntry]) -> Result<Self> {
        let p = &config.pretrain;
        let model = match &p.init_checkpoint {
            Some(path) => {
                let source = Checkpoint::read(path)?.params()?;
                CareModel::warm(&config.model, p.seed, p.freeze, &source, true)?
            }
            None => CareModel::random(&config.model, p.seed, p.freeze)?,
        };
        let teachers = Teachers::for_model(&config.model)?;
        let data = load_utterances(entries, &teachers)?;
        let optimizer = AdamW::new(adamw_config(config), model.store.len());
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            curve: Vec::new(),
            teachers,
            data,
        })
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(config: &Config, entries: &[ManifestEntry], ckpt: &Checkpoint) -> Result<Self> {
        let mut run = Self::new(&Config {
            pretrain: crate::config::PretrainConfig {
                init_checkpoint: None,
                ..config.pretrain.clone()
            },
            ..config.clone()
        }, entries)?;
        run.config = config.clone();
        let params = ckpt.params()?;
        run.model.load_exact(&params)?;
        run.optimizer = ckpt
            .optimizer(&run.model.store, adamw_config(config))?
            .ok_or_else(|| Error::Input("checkpoint carries no optimizer state to resume from".into()))?;
        let steps = run.optimizer.step_count() as usize;
        run.curve = match ckpt.get(CURVE_TENSOR) {
            Some(t) if t.rank() == 2 && t.cols() == 3 && t.rows() == steps => {
                (0..steps).map(|r| [t.row(r)[0], t.row(r)[1], t.row(r)[2]]).collect()
            }
            None if steps == 0 => Vec::new(),
            _ => return Err(Error::Input("checkpoint loss curve does not match its step count".into())),
        };
        Ok(run)
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Batch for the next step.
    pub fn next_batch(&self) -> Result<PretrainBatch> {
        let p = &self.config.pretrain;
        let step = self.step_count();
        let idx = batch_indices(self.data.len(), p.batch_size, p.seed, step)?;
        assemble_batch(&self.data, &idx, &self.teachers, p.crop_seconds, p.seed, step)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch()?;
        let report = pretrain_step(&mut self.model, &mut self.optimizer, &batch, self.config.pretrain.lambda)?;
        self.curve.push([report.l_sem, report.l_acoust, report.l_tot]);
        Ok(report)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.config.to_ini());
        ckpt.push_params(&self.model.store);
        ckpt.push_optimizer(&self.model.store, &self.optimizer)?;
        if !self.curve.is_empty() {
            let data = self.curve.iter().flatten().copied().collect();
            ckpt.push(CURVE_TENSOR, Tensor::new(vec![self.curve.len(), 3], data)?);
        }
        debug_assert!(CURVE_TENSOR.starts_with(META_PREFIX));
        Ok(ckpt)
    }

    /// `step,l_sem,l_acoust,l_tot` lines for the whole curve.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,l_sem,l_acoust,l_tot\n");
        for (i, [a, b, c]) in self.curve.iter().enumerate() {
            let _ = writeln!(s, "{},{a},{b},{c}", i + 1);
        }
        s
    }
}

/// Where the loss curve of a run writing `ckpt` goes.
pub fn curve_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".losses.csv");
    PathBuf::from(s)
}

/// Trains to `config.pretrain.steps`, writing the checkpoint to `out` at the
/// configured cadence and at the end, plus the loss curve beside it.
/// `on_step` sees every report (for progress output).
pub fn run_pretraining(
    entries: &[ManifestEntry],
    config: &Config,
    out: &Path,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Pretrainer> {
    let mut run = match resume {
        Some(ckpt) => Pretrainer::resume(config, entries, ckpt)?,
        None => Pretrainer::new(config, entries)?,
    };
    let every = config.pretrain.checkpoint_every;
    let save = |run: &Pretrainer| -> Result<()> {
        run.checkpoint()?.write(out)?;
        write_atomic(&curve_path(out), run.curve_csv().as_bytes())
    };
    while run.step_count() < config.pretrain.steps {
        let report = run.step()?;
        on_step(&report);
        if every > 0 && report.step % every == 0 && report.step < config.pretrain.steps {
            save(&run)?;
        }
    }
    save(&run)?;
    Ok(run)
}

/// Rebuilds the configuration and model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Config, CareModel)> {
    let config = Config::parse(&ckpt.config_echo, "checkpoint config")?;
    let mut model = CareModel::random(&config.model, 0, config.pretrain.freeze)?;
    model.load_exact(&ckpt.params()?)?;
    Ok((config, model))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between the pooled semantic prediction and the text target,
/// over whole utterances.
pub fn semantic_alignment(model: &CareModel, data: &[Utterance]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for u in data {
        let c = crop_or_pad(&u.waveform, DOWNSTREAM_MAX_SECONDS, &mut rng, CropMode::Downstream)?;
        let mut g = Graph::new();
        let mut b = Binder::inference(&model.store);
        let (out, _) = model.forward(&mut g, &mut b, c.waveform.samples(), c.valid_samples)?;
        total += cosine(g.value(out.semantic_pooled).data(), &u.y_text);
    }
    Ok(total / data.len() as f64)
}

/// Central-difference check of the total loss of a desk-sized model in
/// 64-bit mode, on `per_tensor` random coordinates of every trainable
/// parameter. Returns the max relative error.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, per_tensor: usize, h: f64) -> Result<f64> {
    let model32 = CareModel::random(config, seed, Default::default())?;
    let mut model: CareModel<f64> = model32.cast();
    let teachers = Teachers::for_model(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let items = (0..2)
        .map(|i| {
            let len = 4800 + 1600 * i;
            let samples: Vec<f32> = (0..len)
                .map(|n| {
                    let t = n as f32 / 16000.0;
                    0.3 * (2.0 * std::f32::consts::PI * (140.0 + 40.0 * i as f32) * t).sin()
                        + 0.05 * (rng.random::<f32>() - 0.5)
                })
                .collect();
            let waveform = Waveform::new(samples)?;
            // The second clip ends in padding, so masking is on the checked path.
            let valid_samples = len - 800 * i;
            let text = if i == 0 { "calm river morning" } else { "bright fire" };
            let cropped = Cropped { waveform, valid_samples };
            let y_pase = teachers.acoustic_targets(cropped.waveform.samples())?;
            Ok(PretrainItem {
                y_text: teachers.semantic.embed_text(text)?,
                cropped,
                y_pase,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // The clips differ in length, so each is its own batch.
    let batches: Vec<PretrainBatch> = items.into_iter().map(|it| PretrainBatch { items: vec![it] }).collect();

    let eval = |m: &CareModel<f64>| -> Result<f64> {
        let mut total = 0.0;
        for batch in &batches {
            let mut g = Graph::new();
            let mut b = Binder::inference(&m.store);
            let l = batch_loss(m, &mut g, &mut b, batch, 1.0)?;
            total += g.value(l.total).item();
        }
        Ok(total)
    };

    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; model.store.len()];
    for batch in &batches {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.store);
        let l = batch_loss(&model, &mut g, &mut b, batch, 1.0)?;
        g.backward(l.total)?;
        for (id, grad) in b.gradients(&g).iter() {
            if let Some(grad) = grad {
                let slot = &mut analytic[id.index()];
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, &x)| *a += x),
                    None => *slot = Some(grad.clone()),
                }
            }
        }
    }

    let mut worst = 0.0f64;
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let numel = model.store.get(id).value.numel();
        for _ in 0..per_tensor.min(numel) {
            let i = rng.random_range(0..numel);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            let orig = model.store.get(id).value.data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&model)?;
            model.store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&model)?;
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck of `{}`[{i}]: analytic {a}, numeric {numeric}",
                    model.store.get(id).name
                )));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
