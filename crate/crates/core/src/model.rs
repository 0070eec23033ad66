//! The three-encoder network: a shared common encoder feeding a semantic
//! branch (frozen transformer layers bracketed by trainable convolutional
//! adapters) and an acoustic branch with a frame-level projection head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::frontend::{frame_validity, FrameExtractor, FRAME_RATE};
use crate::nn::{sinusoidal_positions, Conv1d, Linear, TransformerLayer};
use crate::teachers::{SemanticTeacher, TEACHER_LAYERS};
use crate::tensor::{Binder, Graph, Padding, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk|paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Where the frozen semantic transformer layers come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemanticInit {
    /// Copied from the pseudo-text teacher (layer `i` takes teacher layer `i mod 2`).
    Teacher,
    Random,
}

impl FromStr for SemanticInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!(
                "unknown semantic_init `{other}` (expected teacher|random)"
            ))),
        }
    }
}

impl fmt::Display for SemanticInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Teacher => "teacher",
            Self::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub width: usize,
    pub heads: usize,
    pub common_layers: usize,
    pub semantic_layers: usize,
    pub acoustic_layers: usize,
    pub adapter_kernel: usize,
    pub adapter_factor: usize,
    /// Acoustic target width `F + 4`.
    pub acoustic_dim: usize,
    /// Semantic target width.
    pub semantic_dim: usize,
    /// Channel count inside the convolutional extractor.
    pub extractor_width: usize,
    pub semantic_init: SemanticInit,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            width: 64,
            heads: 4,
            common_layers: 2,
            semantic_layers: 2,
            acoustic_layers: 2,
            adapter_kernel: 5,
            adapter_factor: 3,
            acoustic_dim: 16,
            semantic_dim: 64,
            extractor_width: 32,
            semantic_init: SemanticInit::Teacher,
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            width: 768,
            heads: 12,
            common_layers: 6,
            semantic_layers: 6,
            acoustic_layers: 6,
            adapter_kernel: 5,
            adapter_factor: 3,
            acoustic_dim: 256,
            semantic_dim: 768,
            extractor_width: 512,
            semantic_init: SemanticInit::Teacher,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.semantic_layers != self.acoustic_layers {
            return fail(format!(
                "semantic_layers ({}) must equal acoustic_layers ({}) for paired bank entries",
                self.semantic_layers, self.acoustic_layers
            ));
        }
        if self.semantic_layers == 0 {
            return fail("semantic_layers must be at least 1".into());
        }
        if self.adapter_factor == 0 {
            return fail("adapter_factor must be at least 1".into());
        }
        if self.adapter_kernel % 2 == 0 {
            return fail(format!("adapter_kernel must be odd, got {}", self.adapter_kernel));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.acoustic_dim < 5 {
            return fail(format!("acoustic_dim must be at least 5, got {}", self.acoustic_dim));
        }
        if self.semantic_dim == 0 || self.extractor_width == 0 {
            return fail("semantic_dim and extractor_width must be positive".into());
        }
        if self.semantic_init == SemanticInit::Teacher && self.semantic_dim % self.heads != 0 {
            return fail(format!(
                "semantic_dim {} must be a multiple of heads {} for the teacher",
                self.semantic_dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn bank_size(&self) -> usize {
        1 + self.common_layers + self.semantic_layers
    }

    pub fn bank_width(&self) -> usize {
        2 * self.width
    }
}

/// Which parts start frozen. The semantic transformer is always frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub extractor: bool,
    pub common: bool,
}

/// Strided down-convolution and repeat-then-convolve up path around one
/// frozen transformer layer.
#[derive(Clone, Debug)]
pub struct SemanticBlock {
    pub down: Conv1d,
    pub transformer: TransformerLayer,
    pub up: Conv1d,
}

#[derive(Clone, Debug)]
pub struct CareModel<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub extractor: FrameExtractor,
    pub common: Vec<TransformerLayer>,
    pub semantic: Vec<SemanticBlock>,
    /// Present only when the semantic target width differs from the model width.
    pub semantic_projection: Option<Linear>,
    pub acoustic: Vec<TransformerLayer>,
    pub acoustic_projection: Linear,
}

/// Everything one forward pass produces, as graph variables.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub extractor: Var,
    pub common: Vec<Var>,
    pub semantic: Vec<Var>,
    pub acoustic: Vec<Var>,
    /// Utterance-level semantic prediction, `[D_s]`.
    pub semantic_pooled: Var,
    /// Frame-level acoustic prediction, `T × D_a`.
    pub acoustic_pred: Var,
}

/// Per-layer representations for probing: each entry is `T × 2C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBank<T = f32> {
    pub labels: Vec<String>,
    pub entries: Vec<Tensor<T>>,
    pub valid: Vec<bool>,
}

impl<T: Real> LayerBank<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.valid.len()
    }

    pub fn width(&self) -> usize {
        self.entries.first().map_or(0, |e| e.cols())
    }

    /// Masked mean of every entry over valid frames, `bank × 2C`.
    pub fn pooled(&self) -> Result<Tensor<T>> {
        let n = self.valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::EmptyPool);
        }
        let width = self.width();
        let mut data = Vec::with_capacity(self.len() * width);
        for e in &self.entries {
            let mut acc = vec![T::zero(); width];
            for (r, _) in self.valid.iter().enumerate().filter(|(_, &v)| v) {
                for (a, &x) in acc.iter_mut().zip(e.row(r)) {
                    *a += x;
                }
            }
            let inv = T::one() / T::lit(n as f64);
            data.extend(acc.into_iter().map(|a| a * inv));
        }
        Tensor::new(vec![self.len(), width], data)
    }
}

/// Rows whose flag is false become zero.
pub fn mask_rows<T: Real>(g: &mut Graph<T>, x: Var, valid: &[bool]) -> Result<Var> {
    if valid.iter().all(|&v| v) {
        return Ok(x);
    }
    let scale = valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    g.row_scale(x, scale)
}

/// Validity after stride-`factor` downsampling: position `i` inherits frame `i·factor`.
pub fn downsampled_mask(valid: &[bool], factor: usize) -> Vec<bool> {
    valid.iter().step_by(factor).copied().collect()
}

impl SemanticBlock {
    /// `T × C → ceil(T / factor) × C`
    pub fn adapter_down<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var, valid: &[bool]) -> Result<Var> {
        let x = mask_rows(g, x, valid)?;
        self.down.forward(g, b, x)
    }

    /// `T' × C → target × C`: nearest-neighbour repeat, stride-1 convolution, trim.
    pub fn adapter_up<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        x: Var,
        down_valid: &[bool],
        target: usize,
    ) -> Result<Var> {
        let factor = self.down.stride;
        let len = g.shape(x)[0];
        if len * factor < target {
            return Err(Error::Contract(format!(
                "adapter_up: {len} rows × {factor} cannot cover {target} frames"
            )));
        }
        let x = mask_rows(g, x, down_valid)?;
        let x = g.repeat_rows(x, factor)?;
        let y = self.up.forward(g, b, x)?;
        if len * factor == target {
            Ok(y)
        } else {
            g.slice_rows(y, 0, target)
        }
    }
}

impl CareModel<f32> {
    /// Seed-deterministic random initialization.
    pub fn random(config: &ModelConfig, seed: u64, freeze: Freeze) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.width;
        let extractor = FrameExtractor::new(&mut store, config.extractor_width, c, &mut rng, freeze.extractor)?;
        let common = (0..config.common_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("common.layer{i}"), c, config.heads, &mut rng, freeze.common))
            .collect::<Result<Vec<_>>>()?;

        let teacher = match config.semantic_init {
            SemanticInit::Teacher if config.semantic_dim == c => Some(SemanticTeacher::new(c, config.heads)?),
            _ => None,
        };
        let mut semantic = Vec::with_capacity(config.semantic_layers);
        for i in 0..config.semantic_layers {
            let name = format!("semantic.block{i}");
            let down = Conv1d::new(
                &mut store,
                &format!("{name}.down"),
                config.adapter_kernel,
                c,
                c,
                config.adapter_factor,
                Padding::Same,
                true,
                &mut rng,
            )?;
            let transformer =
                TransformerLayer::new(&mut store, &format!("{name}.transformer"), c, config.heads, &mut rng, true)?;
            if let Some(t) = &teacher {
                for (id, value) in transformer.param_ids().into_iter().zip(t.layer_tensors(i % TEACHER_LAYERS)) {
                    store.get_mut(id).value = value;
                }
            }
            let up = Conv1d::new(
                &mut store,
                &format!("{name}.up"),
                config.adapter_kernel,
                c,
                c,
                1,
                Padding::Same,
                true,
                &mut rng,
            )?;
            semantic.push(SemanticBlock { down, transformer, up });
        }
        let semantic_projection = if config.semantic_dim != c {
            Some(Linear::new(&mut store, "semantic.projection", c, config.semantic_dim, &mut rng, false)?)
        } else {
            None
        };
        let acoustic = (0..config.acoustic_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("acoustic.layer{i}"), c, config.heads, &mut rng, false))
            .collect::<Result<Vec<_>>>()?;
        let acoustic_projection =
            Linear::new(&mut store, "acoustic.projection", c, config.acoustic_dim, &mut rng, false)?;
        Ok(Self {
            config: config.clone(),
            store,
            extractor,
            common,
            semantic,
            semantic_projection,
            acoustic,
            acoustic_projection,
        })
    }

    /// Random init, then every tensor of `source` whose name exists here is
    /// copied over. Semantic-branch tensors are copied only when
    /// `include_semantic` is set.
    pub fn warm(
        config: &ModelConfig,
        seed: u64,
        freeze: Freeze,
        source: &ParamStore<f32>,
        include_semantic: bool,
    ) -> Result<Self> {
        let mut model = Self::random(config, seed, freeze)?;
        let mut mismatched = Vec::new();
        let mut updates = Vec::new();
        for (id, p) in model.store.iter() {
            if !include_semantic && p.name.starts_with("semantic.") {
                continue;
            }
            if let Some(src) = source.by_name(&p.name) {
                if src.value.shape() == p.value.shape() {
                    updates.push((id, src.value.clone()));
                } else {
                    mismatched.push(format!(
                        "{} (expected {:?}, found {:?})",
                        p.name,
                        p.value.shape(),
                        src.value.shape()
                    ));
                }
            }
        }
        if !mismatched.is_empty() {
            return Err(CheckpointError::Incompatible(mismatched).into());
        }
        for (id, v) in updates {
            model.store.get_mut(id).value = v;
        }
        Ok(model)
    }

    /// Replaces every parameter from `source`, which must hold exactly the
    /// same names and shapes. Frozen flags are taken from `source`.
    pub fn load_exact(&mut self, source: &ParamStore<f32>) -> Result<()> {
        let mut problems = Vec::new();
        for (_, p) in self.store.iter() {
            match source.by_name(&p.name) {
                Some(s) if s.value.shape() == p.value.shape() => {}
                Some(s) => problems.push(format!(
                    "{} (expected {:?}, found {:?})",
                    p.name,
                    p.value.shape(),
                    s.value.shape()
                )),
                None => problems.push(format!("{} (missing)", p.name)),
            }
        }
        for (_, s) in source.iter() {
            if self.store.by_name(&s.name).is_none() {
                problems.push(format!("{} (unexpected)", s.name));
            }
        }
        if !problems.is_empty() {
            return Err(CheckpointError::Incompatible(problems).into());
        }
        for (_, p) in self.store.iter_mut() {
            let s = source.by_name(&p.name).expect("checked");
            p.value = s.value.clone();
            p.frozen = s.frozen;
        }
        Ok(())
    }
}

impl<T: Real> CareModel<T> {
    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> CareModel<U> {
        CareModel {
            config: self.config.clone(),
            store: self.store.cast(),
            extractor: self.extractor.clone(),
            common: self.common.clone(),
            semantic: self.semantic.clone(),
            semantic_projection: self.semantic_projection.clone(),
            acoustic: self.acoustic.clone(),
            acoustic_projection: self.acoustic_projection.clone(),
        }
    }

    /// Parameter ids of the frozen semantic transformer layers.
    pub fn frozen_semantic_ids(&self) -> Vec<ParamId> {
        self.semantic.iter().flat_map(|b| b.transformer.param_ids()).collect()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        let conv = |c: &Conv1d| std::iter::once(c.weight).chain(c.bias);
        self.semantic
            .iter()
            .flat_map(|b| conv(&b.down).chain(conv(&b.up)).collect::<Vec<_>>())
            .collect()
    }

    pub fn common_ids(&self) -> Vec<ParamId> {
        self.common.iter().flat_map(|l| l.param_ids()).collect()
    }

    /// Acoustic transformer layers plus the projection head.
    pub fn acoustic_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.acoustic.iter().flat_map(|l| l.param_ids()).collect();
        ids.extend([self.acoustic_projection.weight, self.acoustic_projection.bias]);
        ids
    }

    /// Common, semantic and acoustic encoders over extractor output `x`
    /// (`T × C`, before positions).
    pub fn encode(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var, valid: &[bool]) -> Result<Outputs> {
        let len = g.shape(x)[0];
        if valid.len() != len {
            return Err(Error::Shape {
                op: "encode",
                lhs: g.shape(x).to_vec(),
                rhs: vec![valid.len()],
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::EmptyPool);
        }
        let pos = g.constant(sinusoidal_positions(len, self.config.width));
        let mut h = g.add(x, pos)?;
        let mut common = Vec::with_capacity(self.common.len());
        for layer in &self.common {
            h = layer.forward(g, b, h, valid)?;
            common.push(h);
        }
        let shared = h;

        let down_valid = downsampled_mask(valid, self.config.adapter_factor);
        let mut semantic = Vec::with_capacity(self.semantic.len());
        let mut s = shared;
        for block in &self.semantic {
            let d = block.adapter_down(g, b, s, valid)?;
            let d = block.transformer.forward(g, b, d, &down_valid)?;
            let u = block.adapter_up(g, b, d, &down_valid, len)?;
            s = mask_rows(g, u, valid)?;
            semantic.push(s);
        }
        let mut semantic_pooled = g.masked_mean_pool(s, valid)?;
        if let Some(p) = &self.semantic_projection {
            let row = g.reshape(semantic_pooled, &[1, self.config.width])?;
            let y = p.forward(g, b, row)?;
            semantic_pooled = g.reshape(y, &[self.config.semantic_dim])?;
        }

        let mut acoustic = Vec::with_capacity(self.acoustic.len());
        let mut a = shared;
        for layer in &self.acoustic {
            a = layer.forward(g, b, a, valid)?;
            acoustic.push(a);
        }
        let acoustic_pred = self.acoustic_projection.forward(g, b, a)?;

        Ok(Outputs {
            extractor: x,
            common,
            semantic,
            acoustic,
            semantic_pooled,
            acoustic_pred,
        })
    }

    /// Full forward from samples; `valid_samples` marks the unpadded prefix.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        samples: &[f32],
        valid_samples: usize,
    ) -> Result<(Outputs, Vec<bool>)> {
        let x = self.extractor.forward(g, b, samples)?;
        let valid = frame_validity(samples.len(), valid_samples);
        let out = self.encode(g, b, x, &valid)?;
        Ok((out, valid))
    }

    /// Bank layout: extractor, common layers, then (semantic ∥ acoustic) pairs.
    /// Extractor and common entries are concatenated with themselves.
    pub fn bank_from_outputs(&self, g: &mut Graph<T>, out: &Outputs, valid: &[bool]) -> Result<LayerBank<T>> {
        let mut labels = Vec::new();
        let mut vars = Vec::new();
        labels.push("extractor".to_string());
        vars.push(g.concat_cols(&[out.extractor, out.extractor])?);
        for (i, &c) in out.common.iter().enumerate() {
            labels.push(format!("common.{}", i + 1));
            vars.push(g.concat_cols(&[c, c])?);
        }
        if out.semantic.len() != out.acoustic.len() {
            return Err(Error::Config(format!(
                "{} semantic vs {} acoustic layers cannot be paired",
                out.semantic.len(),
                out.acoustic.len()
            )));
        }
        for (i, (&s, &a)) in out.semantic.iter().zip(&out.acoustic).enumerate() {
            labels.push(format!("pair.{}", i + 1));
            vars.push(g.concat_cols(&[s, a])?);
        }
        Ok(LayerBank {
            labels,
            entries: vars.into_iter().map(|v| g.value(v).clone()).collect(),
            valid: valid.to_vec(),
        })
    }

    /// Inference-only layer bank for one waveform.
    pub fn layer_bank(&self, samples: &[f32], valid_samples: usize) -> Result<LayerBank<T>> {
        let mut g = Graph::new();
        let mut b = Binder::inference(&self.store);
        let (out, valid) = self.forward(&mut g, &mut b, samples, valid_samples)?;
        self.bank_from_outputs(&mut g, &out, &valid)
    }

    pub fn frame_rate(&self) -> u32 {
        FRAME_RATE
    }
}

/// Parameter tensors keyed by name, for equality checks across runs.
pub fn snapshot<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> BTreeMap<String, Tensor<T>> {
    ids.iter()
        .map(|&id| {
            let p = store.get(id);
            (p.name.clone(), p.value.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            common_layers: 1,
            semantic_layers: 2,
            acoustic_layers: 2,
            acoustic_dim: 6,
            semantic_dim: 8,
            extractor_width: 4,
            ..ModelConfig::desk()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn adapter_round_trip_length_exhaustive() {
        let model = CareModel::random(&tiny(), 0, Freeze::default()).unwrap();
        let block = &model.semantic[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=400usize {
            let mut g = Graph::<f32>::new();
            let mut b = Binder::inference(&model.store);
            let x = g.constant(crate::nn::normal(&mut rng, &[t, 8], 1.0));
            let valid = vec![true; t];
            let d = block.adapter_down(&mut g, &mut b, x, &valid).unwrap();
            assert_eq!(g.shape(d)[0], t.div_ceil(3), "T={t}");
            let dv = downsampled_mask(&valid, 3);
            assert_eq!(dv.len(), t.div_ceil(3));
            let u = block.adapter_up(&mut g, &mut b, d, &dv, t).unwrap();
            assert_eq!(g.shape(u), &[t, 8], "T={t}");
        }
    }

    #[test]
    fn adapter_length_examples_and_contract() {
        let model = CareModel::random(&tiny(), 0, Freeze::default()).unwrap();
        let block = &model.semantic[0];
        let mut g = Graph::<f32>::new();
        let mut b = Binder::inference(&model.store);
        for (t, want) in [(9, 3), (10, 4), (1, 1)] {
            let x = g.constant(Tensor::filled(&[t, 8], 0.5));
            let d = block.adapter_down(&mut g, &mut b, x, &vec![true; t]).unwrap();
            assert_eq!(g.shape(d)[0], want);
        }
        let x = g.constant(Tensor::filled(&[3, 8], 0.5));
        let u = block.adapter_up(&mut g, &mut b, x, &[true; 3], 9).unwrap();
        assert_eq!(g.shape(u)[0], 9);
        let x = g.constant(Tensor::filled(&[4, 8], 0.5));
        let u = block.adapter_up(&mut g, &mut b, x, &[true; 4], 10).unwrap();
        assert_eq!(g.shape(u)[0], 10);
        let x = g.constant(Tensor::filled(&[3, 8], 0.5));
        assert!(matches!(
            block.adapter_up(&mut g, &mut b, x, &[true; 3], 10),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bank_cardinality_and_widths() {
        for (common, branch) in [(0, 1), (1, 2), (2, 2), (3, 1)] {
            let cfg = ModelConfig {
                common_layers: common,
                semantic_layers: branch,
                acoustic_layers: branch,
                ..tiny()
            };
            let model = CareModel::random(&cfg, 3, Freeze::default()).unwrap();
            let bank = model.layer_bank(&samples(3_200, 1), 3_200).unwrap();
            assert_eq!(bank.len(), 1 + common + branch);
            assert_eq!(bank.len(), cfg.bank_size());
            assert!(bank.entries.iter().all(|e| e.shape() == [10, 16]));
            assert_eq!(bank.labels[0], "extractor");
        }
        let desk = ModelConfig::desk();
        assert_eq!((desk.bank_size(), desk.bank_width()), (5, 128));
        let paper = ModelConfig::paper();
        assert_eq!((paper.bank_size(), paper.bank_width()), (13, 1536));
    }

    #[test]
    fn unpaired_branches_rejected() {
        let cfg = ModelConfig {
            acoustic_layers: 1,
            ..tiny()
        };
        assert!(matches!(CareModel::random(&cfg, 0, Freeze::default()), Err(Error::Config(_))));
        let cfg = ModelConfig {
            adapter_kernel: 4,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = CareModel::random(&tiny(), 11, Freeze::default()).unwrap();
        let b = CareModel::random(&tiny(), 11, Freeze::default()).unwrap();
        let c = CareModel::random(&tiny(), 12, Freeze::default()).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        let x = samples(4_000, 2);
        assert_eq!(a.layer_bank(&x, 4_000).unwrap(), b.layer_bank(&x, 4_000).unwrap());
    }

    #[test]
    fn semantic_transformer_frozen_and_teacher_initialized() {
        let model = CareModel::random(&tiny(), 0, Freeze::default()).unwrap();
        for id in model.frozen_semantic_ids() {
            assert!(model.store.get(id).frozen);
        }
        let teacher = SemanticTeacher::new(8, 2).unwrap();
        for (i, block) in model.semantic.iter().enumerate() {
            let mine: Vec<_> = block.transformer.param_ids().iter().map(|&id| model.store.get(id).value.clone()).collect();
            assert_eq!(mine, teacher.layer_tensors(i % TEACHER_LAYERS));
        }
        for id in model.adapter_ids().into_iter().chain(model.acoustic_ids()).chain(model.common_ids()) {
            assert!(!model.store.get(id).frozen);
        }
    }

    #[test]
    fn freeze_flags_apply() {
        let model = CareModel::random(
            &tiny(),
            0,
            Freeze {
                extractor: true,
                common: true,
            },
        )
        .unwrap();
        assert!(model.extractor.param_ids().iter().all(|&id| model.store.get(id).frozen));
        assert!(model.common_ids().iter().all(|&id| model.store.get(id).frozen));
    }

    fn encode_frames(model: &CareModel<f64>, frames: &Tensor<f64>, valid: &[bool]) -> (Vec<Tensor<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let mut b = Binder::inference(&model.store);
        let x = g.constant(frames.clone());
        let out = model.encode(&mut g, &mut b, x, valid).unwrap();
        let reps = out
            .common
            .iter()
            .chain(&out.semantic)
            .chain(&out.acoustic)
            .map(|&v| g.value(v).clone())
            .collect();
        (reps, g.value(out.semantic_pooled).clone())
    }

    #[test]
    fn padding_extension_invariance() {
        let model = CareModel::random(&tiny(), 4, Freeze::default()).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in [1usize, 5, 9, 10, 17] {
            for extra in [1usize, 2, 3, 7] {
                let base: Tensor<f64> = crate::nn::normal(&mut rng, &[t, 8], 1.0);
                let junk: Tensor<f64> = crate::nn::normal(&mut rng, &[extra, 8], 5.0);
                let mut data = base.data().to_vec();
                data.extend_from_slice(junk.data());
                let padded = Tensor::new(vec![t + extra, 8], data).unwrap();
                let mut valid = vec![true; t];
                let (a, pa) = encode_frames(&model, &base, &valid);
                valid.extend(vec![false; extra]);
                let (b, pb) = encode_frames(&model, &padded, &valid);
                for (ra, rb) in a.iter().zip(&b) {
                    for r in 0..t {
                        for (x, y) in ra.row(r).iter().zip(rb.row(r)) {
                            assert!((x - y).abs() < 1e-5, "T={t} extra={extra}");
                        }
                    }
                }
                assert!(pa.max_abs_diff(&pb) < 1e-5);
            }
        }
    }

    #[test]
    fn zeroed_adapters_block_content() {
        let mut model = CareModel::random(&tiny(), 5, Freeze::default()).unwrap();
        for id in model.adapter_ids() {
            let p = model.store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let pooled = |x: &[f32]| {
            let mut g = Graph::new();
            let mut b = Binder::inference(&model.store);
            let (out, _) = model.forward(&mut g, &mut b, x, x.len()).unwrap();
            g.value(out.semantic_pooled).clone()
        };
        let a = pooled(&samples(3_200, 1));
        let b = pooled(&samples(3_200, 2));
        assert_eq!(a.shape(), &[8]);
        assert_eq!(a, b);
    }

    #[test]
    fn output_shapes_and_projection_excluded_from_bank() {
        let cfg = ModelConfig {
            semantic_dim: 12,
            semantic_init: SemanticInit::Random,
            ..tiny()
        };
        let model = CareModel::random(&cfg, 0, Freeze::default()).unwrap();
        let mut g = Graph::<f32>::new();
        let mut b = Binder::inference(&model.store);
        let x = samples(6_400, 3);
        let (out, valid) = model.forward(&mut g, &mut b, &x, x.len()).unwrap();
        assert_eq!(g.shape(out.acoustic_pred), &[20, 6]);
        assert_eq!(g.shape(out.semantic_pooled), &[12]);
        let bank = model.bank_from_outputs(&mut g, &out, &valid).unwrap();
        assert!(bank.entries.iter().all(|e| e.cols() == 16));
    }

    #[test]
    fn warm_init_copies_and_reports_mismatch() {
        let src = CareModel::random(&tiny(), 1, Freeze::default()).unwrap();
        let warm = CareModel::warm(&tiny(), 2, Freeze::default(), &src.store, false).unwrap();
        for (_, p) in warm.store.iter() {
            let s = src.store.by_name(&p.name).unwrap();
            if p.name.starts_with("semantic.") && !p.frozen {
                if p.name.ends_with(".weight") {
                    assert_ne!(p.value, s.value, "{}", p.name);
                }
            } else {
                assert_eq!(p.value, s.value, "{}", p.name);
            }
        }
        let full = CareModel::warm(&tiny(), 2, Freeze::default(), &src.store, true).unwrap();
        assert_eq!(full.store, src.store);

        let wide = ModelConfig {
            width: 12,
            semantic_dim: 12,
            ..tiny()
        };
        match CareModel::warm(&wide, 0, Freeze::default(), &src.store, false) {
            Err(Error::Checkpoint(CheckpointError::Incompatible(names))) => {
                assert!(names.iter().any(|n| n.starts_with("common.layer0.attn.query.weight")));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn pooled_bank_matches_manual_mean() {
        let model = CareModel::random(&tiny(), 0, Freeze::default()).unwrap();
        let bank = model.layer_bank(&samples(6_400, 4), 4_000).unwrap();
        let pooled = bank.pooled().unwrap();
        let n = bank.valid.iter().filter(|&&v| v).count();
        assert!(n < bank.frames());
        for (k, e) in bank.entries.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.constant(e.clone());
            let p = g.masked_mean_pool(x, &bank.valid).unwrap();
            assert!(g.value(p).max_abs_diff(&Tensor::vector(pooled.row(k).to_vec())) < 1e-6);
        }
    }
}
