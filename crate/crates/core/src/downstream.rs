//! Frozen-backbone probing: convex layer weights over the bank, mean
//! pooling, a two-layer head, the training objectives and the metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{batch_iterator, derive_seed, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::frontend::{crop_or_pad, CropMode, Waveform};
use crate::model::{CareModel, LayerBank};
use crate::nn::Linear;
use crate::tensor::{AdamW, AdamWConfig, Binder, Graph, ParamStore, Real, Tensor, Var};

pub mod oracle;

/// Which branch entries the probe sees. Single-branch variants replace each
/// paired entry by that branch concatenated with itself; extractor and
/// common entries are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BankVariant {
    #[default]
    Both,
    Semantic,
    Acoustic,
}

impl FromStr for BankVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "semantic" => Ok(Self::Semantic),
            "acoustic" => Ok(Self::Acoustic),
            _ => Err(Error::Config(format!("unknown bank variant `{s}` (both|semantic|acoustic)"))),
        }
    }
}

impl fmt::Display for BankVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Both => "both",
            Self::Semantic => "semantic",
            Self::Acoustic => "acoustic",
        })
    }
}

impl BankVariant {
    /// Applies the variant to a `bank × 2C` matrix (pooled or a single frame)
    /// whose last `pairs` rows are paired entries.
    pub fn apply<T: Real>(self, rows: &Tensor<T>, pairs: usize) -> Result<Tensor<T>> {
        let half = rows.cols() / 2;
        let offset = match self {
            Self::Both => return Ok(rows.clone()),
            Self::Semantic => 0,
            Self::Acoustic => half,
        };
        let first_pair = rows.rows().checked_sub(pairs).ok_or_else(|| {
            Error::Contract(format!("{pairs} pairs in a bank of {}", rows.rows()))
        })?;
        let mut out = rows.clone();
        for r in first_pair..rows.rows() {
            let src = rows.row(r)[offset..offset + half].to_vec();
            let dst = &mut out.data_mut()[r * 2 * half..(r + 1) * 2 * half];
            dst[..half].copy_from_slice(&src);
            dst[half..].copy_from_slice(&src);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Categorical,
    Attributes,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(Self::Categorical),
            "attributes" => Ok(Self::Attributes),
            _ => Err(Error::Config(format!("unknown task `{s}` (categorical|attributes)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Categorical { classes: usize },
    /// Valence, arousal, dominance.
    Attributes,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Categorical { classes } => classes,
            Task::Attributes => 3,
        }
    }

    /// Checks the labels against the task kind; categorical class count is
    /// the largest label seen plus one.
    pub fn infer(kind: TaskKind, labels: &[&Label]) -> Result<Self> {
        match kind {
            TaskKind::Categorical => {
                let mut max = 0;
                for l in labels {
                    match l {
                        Label::Class(c) => max = max.max(*c),
                        other => return Err(Error::Input(format!("categorical task got label `{other}`"))),
                    }
                }
                let classes = max + 1;
                if classes < 2 {
                    return Err(Error::Input("categorical task needs at least 2 classes".into()));
                }
                Ok(Task::Categorical { classes })
            }
            TaskKind::Attributes => {
                if let Some(other) = labels.iter().find(|l| !matches!(l, Label::Attributes(_))) {
                    return Err(Error::Input(format!("attribute task got label `{other}`")));
                }
                Ok(Task::Attributes)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Attributes(Vec<[f64; 3]>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Attributes(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_labels(task: Task, labels: &[&Label]) -> Result<Self> {
        match task {
            Task::Categorical { classes } => labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) if *c < classes => Ok(*c),
                    other => Err(Error::Input(format!("label `{other}` does not fit {classes} classes"))),
                })
                .collect::<Result<_>>()
                .map(Targets::Classes),
            Task::Attributes => labels
                .iter()
                .map(|l| match l {
                    Label::Attributes(v) => Ok(*v),
                    other => Err(Error::Input(format!("label `{other}` is not an attribute triple"))),
                })
                .collect::<Result<_>>()
                .map(Targets::Attributes),
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Attributes(a) => Targets::Attributes(idx.iter().map(|&i| a[i]).collect()),
        }
    }
}

// ---- metrics ----

fn check_classes(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "metric needs equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Input(format!("class {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// `confusion[true][pred]`
fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

/// Class-frequency-weighted mean of per-class F1. A class with no true and
/// no predicted positives scores 0 (and has weight 0 when absent from labels).
pub fn weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check_classes(preds, labels, k)?;
    let m = confusion(preds, labels, k);
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let support: usize = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = m[c][c] as f64;
        let predicted: usize = (0..k).map(|r| m[r][c]).sum();
        let denom = support as f64 + predicted as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

/// Mean recall over classes present in `labels`.
pub fn uar(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check_classes(preds, labels, k)?;
    let m = confusion(preds, labels, k);
    let (mut sum, mut present) = (0.0, 0usize);
    for (c, row) in m.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support > 0 {
            sum += row[c] as f64 / support as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

/// Concordance correlation with population moments; 0 when either series is constant.
pub fn ccc(g: &[f64], p: &[f64]) -> Result<f64> {
    if g.len() != p.len() || g.len() < 2 {
        return Err(Error::Input(format!(
            "ccc needs two equal series of length ≥ 2, got {} and {}",
            g.len(),
            p.len()
        )));
    }
    let n = g.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let (mut cov, mut vg, mut vp) = (0.0, 0.0, 0.0);
    for (&a, &b) in g.iter().zip(p) {
        cov += (a - mg) * (b - mp);
        vg += (a - mg) * (a - mg);
        vp += (b - mp) * (b - mp);
    }
    let (cov, vg, vp) = (cov / n, vg / n, vp / n);
    if vg == 0.0 || vp == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * cov / (vg + vp + (mg - mp) * (mg - mp)))
}

/// `3 − Σ_d ccc(g_d, p_d)` on the tape, for `N × 3` predictions.
pub fn ccc_loss<T: Real>(g: &mut Graph<T>, truth: Var, pred: Var) -> Result<Var> {
    if !matches!(g.shape(pred), [n, 3] if *n >= 2) {
        return Err(Error::Shape {
            op: "ccc_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(truth).to_vec(),
        });
    }
    let mp = g.col_mean(pred)?;
    let mg = g.col_mean(truth)?;
    let neg_mp = g.scale(mp, -T::one())?;
    let neg_mg = g.scale(mg, -T::one())?;
    let pc = g.add_row(pred, neg_mp)?;
    let gc = g.add_row(truth, neg_mg)?;
    let cross = g.mul(pc, gc)?;
    let cov = g.col_mean(cross)?;
    let pp = g.mul(pc, pc)?;
    let vp = g.col_mean(pp)?;
    let gg = g.mul(gc, gc)?;
    let vg = g.col_mean(gg)?;
    let shift = g.sub(mg, mp)?;
    let shift2 = g.mul(shift, shift)?;
    let denom = g.add(vp, vg)?;
    let denom = g.add(denom, shift2)?;
    // Keeps 0/0 (both series constant and equal) finite; far below any real denominator.
    let denom = g.add_scalar(denom, T::lit(1e-12))?;
    let twice = g.scale(cov, T::lit(2.0))?;
    let per_dim = g.div(twice, denom)?;
    let total = g.sum(per_dim)?;
    let neg = g.scale(total, -T::one())?;
    g.add_scalar(neg, T::lit(3.0))
}

// ---- probe model ----

#[derive(Clone, Debug)]
pub struct ProbeModel<T = f32> {
    pub store: ParamStore<T>,
    pub logits: crate::tensor::ParamId,
    pub hidden: Linear,
    pub out: Linear,
    pub bank: usize,
    pub width: usize,
}

impl ProbeModel<f32> {
    pub fn new(bank: usize, width: usize, hidden: usize, outputs: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let logits = store.insert("probe.logits", Tensor::zeros(&[bank]), false)?;
        let hidden_layer = Linear::new(&mut store, "probe.hidden", width, hidden, &mut rng, false)?;
        let out = Linear::new(&mut store, "probe.out", hidden, outputs, &mut rng, false)?;
        Ok(Self {
            store,
            logits,
            hidden: hidden_layer,
            out,
            bank,
            width,
        })
    }
}

impl<T: Real> ProbeModel<T> {
    pub fn cast<U: Real>(&self) -> ProbeModel<U> {
        ProbeModel {
            store: self.store.cast(),
            logits: self.logits,
            hidden: self.hidden.clone(),
            out: self.out.clone(),
            bank: self.bank,
            width: self.width,
        }
    }

    /// Convex weights, `softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let l = self.store.get(self.logits).value.to_f64_vec();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// `Σ_k softmax(logits)_k · entries_k` for `entries[bank × F]`, giving `1 × F`.
    pub fn combine(&self, g: &mut Graph<T>, b: &mut Binder<T>, entries: Var) -> Result<Var> {
        let logits = b.var(g, self.logits);
        let row = g.reshape(logits, &[1, self.bank])?;
        let w = g.softmax_rows(row)?;
        g.matmul(w, entries)
    }

    /// Head over pooled vectors `N × 2C`.
    pub fn head(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, b, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, b, h)
    }

    /// Outputs for `N` pooled banks packed as `bank × (N·2C)`.
    pub fn forward_pooled(&self, g: &mut Graph<T>, b: &mut Binder<T>, packed: Var, n: usize) -> Result<Var> {
        let c = self.combine(g, b, packed)?;
        let x = g.reshape(c, &[n, self.width])?;
        self.head(g, b, x)
    }
}

/// Convex combination of the entries of a bank: `T × 2C`.
pub fn convex_combine<T: Real>(bank: &LayerBank<T>, logits: &[T]) -> Result<Tensor<T>> {
    if logits.len() != bank.len() {
        return Err(Error::Shape {
            op: "convex_combine",
            lhs: vec![bank.len()],
            rhs: vec![logits.len()],
        });
    }
    let (t, w) = (bank.frames(), bank.width());
    let mut g = Graph::new();
    let data: Vec<T> = bank.entries.iter().flat_map(|e| e.data().iter().copied()).collect();
    let entries = g.constant(Tensor::new(vec![bank.len(), t * w], data)?);
    let l = g.constant(Tensor::new(vec![1, logits.len()], logits.to_vec())?);
    let sm = g.softmax_rows(l)?;
    let out = g.matmul(sm, entries)?;
    Ok(g.value(out).clone().reshaped(&[t, w])?)
}

/// Full-bank forward for one utterance: combine, masked mean pool over valid
/// frames, head. Returns the output row.
pub fn probe_forward<T: Real>(bank: &LayerBank<T>, probe: &ProbeModel<T>) -> Result<Vec<T>> {
    if bank.len() != probe.bank || bank.width() != probe.width {
        return Err(Error::Shape {
            op: "probe_forward",
            lhs: vec![bank.len(), bank.width()],
            rhs: vec![probe.bank, probe.width],
        });
    }
    let (t, w) = (bank.frames(), bank.width());
    let mut g = Graph::new();
    let mut b = Binder::inference(&probe.store);
    let data: Vec<T> = bank.entries.iter().flat_map(|e| e.data().iter().copied()).collect();
    let entries = g.constant(Tensor::new(vec![bank.len(), t * w], data)?);
    let c = probe.combine(&mut g, &mut b, entries)?;
    let c = g.reshape(c, &[t, w])?;
    let pooled = g.masked_mean_pool(c, &bank.valid)?;
    let x = g.reshape(pooled, &[1, w])?;
    let y = probe.head(&mut g, &mut b, x)?;
    Ok(g.value(y).data().to_vec())
}

/// `bank × (N·W)` packing of pooled banks, utterance-major within each row.
fn pack(pooled: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = pooled.first().ok_or_else(|| Error::Input("no utterances".into()))?;
    let (l, w) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(l * w * pooled.len());
    for r in 0..l {
        for p in pooled {
            if p.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "pack",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![l, pooled.len() * w], data)
}

/// Pooled banks plus targets for one split.
#[derive(Clone, Debug)]
pub struct ProbeData {
    /// One `bank × 2C` matrix per utterance.
    pub pooled: Vec<Tensor<f32>>,
    pub targets: Targets,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.pooled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.is_empty()
    }

    pub fn with_variant(&self, variant: BankVariant, pairs: usize) -> Result<Self> {
        Ok(Self {
            pooled: self.pooled.iter().map(|p| variant.apply(p, pairs)).collect::<Result<_>>()?,
            targets: self.targets.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
}

/// `(split, metric, value)` triples.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub best_epoch: usize,
    pub metrics: Vec<(String, String, f64)>,
    /// Convex weights of the selected epoch.
    pub weights: Vec<f64>,
}

impl ProbeRecord {
    pub fn get(&self, split: &str, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|(s, m, _)| s == split && m == metric).map(|t| t.2)
    }
}

/// Raw head outputs for every utterance, `N × outputs`.
pub fn predict(probe: &ProbeModel, data: &ProbeData) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = data.pooled.iter().collect();
    let mut g = Graph::new();
    let mut b = Binder::inference(&probe.store);
    let packed = g.constant(pack(&refs)?);
    let y = probe.forward_pooled(&mut g, &mut b, packed, refs.len())?;
    Ok(g.value(y).clone())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Metric name/value pairs; the first is the model-selection criterion.
pub fn evaluate(probe: &ProbeModel, data: &ProbeData, task: Task) -> Result<Vec<(String, f64)>> {
    let out = predict(probe, data)?;
    match (&data.targets, task) {
        (Targets::Classes(labels), Task::Categorical { classes }) => {
            let preds: Vec<usize> = (0..out.rows()).map(|r| argmax(out.row(r))).collect();
            Ok(vec![
                ("wf1".into(), weighted_f1(&preds, labels, classes)?),
                ("uar".into(), uar(&preds, labels, classes)?),
            ])
        }
        (Targets::Attributes(truth), Task::Attributes) => {
            let mut per = Vec::new();
            for (d, name) in ["ccc_v", "ccc_a", "ccc_d"].iter().enumerate() {
                let g: Vec<f64> = truth.iter().map(|t| t[d]).collect();
                let p: Vec<f64> = (0..out.rows()).map(|r| out.row(r)[d] as f64).collect();
                per.push((name.to_string(), ccc(&g, &p)?));
            }
            let mean = per.iter().map(|p| p.1).sum::<f64>() / 3.0;
            let mut all = vec![("ccc_mean".to_string(), mean)];
            all.extend(per);
            Ok(all)
        }
        _ => Err(Error::Input("targets do not match the task".into())),
    }
}

fn batch_objective(g: &mut Graph<f32>, out: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(c) => g.cross_entropy(out, c),
        Targets::Attributes(a) => {
            let data = a.iter().flat_map(|t| t.iter().map(|&v| v as f32)).collect();
            let truth = g.constant(Tensor::new(vec![a.len(), 3], data)?);
            ccc_loss(g, truth, out)
        }
    }
}

/// Trains the convex weights and head on `train`, keeps the epoch with the
/// best validation criterion, and reports train/val/test metrics for it.
pub fn train_probe(
    train: &ProbeData,
    val: &ProbeData,
    test: &ProbeData,
    task: Task,
    seed: u64,
    hyper: &ProbeHyper,
) -> Result<ProbeRecord> {
    let first = train.pooled.first().ok_or_else(|| Error::Input("empty training split".into()))?;
    if val.is_empty() || test.is_empty() {
        return Err(Error::Input("validation and test splits must be non-empty".into()));
    }
    let mut probe = ProbeModel::new(first.rows(), first.cols(), hyper.hidden, task.outputs(), derive_seed(seed, 0))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: hyper.lr,
            weight_decay: hyper.weight_decay,
            ..AdamWConfig::default()
        },
        probe.store.len(),
    );
    // CCC needs at least two rows per batch.
    let min_batch = if task == Task::Attributes { 2 } else { 1 };
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 0..hyper.epochs {
        for idx in batch_iterator(train.len(), hyper.batch_size, derive_seed(seed, 1), epoch as u64)? {
            if idx.len() < min_batch {
                continue;
            }
            let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &train.pooled[i]).collect();
            let mut g = Graph::new();
            let mut b = Binder::new(&probe.store);
            let packed = g.constant(pack(&refs)?);
            let out = probe.forward_pooled(&mut g, &mut b, packed, refs.len())?;
            let loss = batch_objective(&mut g, out, &train.targets.subset(&idx))?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!("probe loss at epoch {}", epoch + 1)));
            }
            g.backward(loss)?;
            let grads = b.gradients(&g);
            opt.step(&mut probe.store, &grads)?;
        }
        let score = evaluate(&probe, val, task)?[0].1;
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch + 1, probe.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.ok_or_else(|| Error::Config("probe needs at least one epoch".into()))?;
    probe.store = store;
    let mut metrics = Vec::new();
    for (split, data) in [("train", train), ("val", val), ("test", test)] {
        for (m, v) in evaluate(&probe, data, task)? {
            metrics.push((split.to_string(), m, v));
        }
    }
    Ok(ProbeRecord {
        best_epoch,
        weights: probe.weights(),
        metrics,
    })
}

// ---- protocol and reports ----

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub seed: String,
    pub fold: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Train/val/test data for one fold.
#[derive(Clone, Debug)]
pub struct Fold {
    pub train: ProbeData,
    pub val: ProbeData,
    pub test: ProbeData,
}

/// One probe per (fold, seed), then mean and population std over seeds for
/// each (fold, split, metric).
pub fn run_protocol(folds: &[Fold], task: Task, seeds: &[u64], hyper: &ProbeHyper) -> Result<Report> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut rows = Vec::new();
    for (fold, data) in folds.iter().enumerate() {
        for &seed in seeds {
            let rec = train_probe(&data.train, &data.val, &data.test, task, seed, hyper)?;
            for (split, metric, value) in rec.metrics {
                rows.push(ReportRow {
                    seed: seed.to_string(),
                    fold,
                    split,
                    metric,
                    value,
                });
            }
        }
    }
    let aggregates = aggregate(&rows);
    rows.extend(aggregates);
    Ok(Report { rows })
}

/// Mean/std rows over seeds, independent of the order of `rows`.
pub fn aggregate(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(usize, String, String), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.fold, r.split.clone(), r.metric.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.value);
    }
    order.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| split_rank(&a.1).cmp(&split_rank(&b.1))).then_with(|| a.2.cmp(&b.2)));
    let mut out = Vec::new();
    for key in order {
        let mut v = groups[&key].clone();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        for (seed, value) in [("mean", mean), ("std", var.sqrt())] {
            out.push(ReportRow {
                seed: seed.into(),
                fold: key.0,
                split: key.1.clone(),
                metric: key.2.clone(),
                value,
            });
        }
    }
    out
}

fn split_rank(s: &str) -> usize {
    match s {
        "train" => 0,
        "val" => 1,
        "test" => 2,
        _ => 3,
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,fold,split,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.seed, r.fold, r.split, r.metric, r.value);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    /// Aggregate value for `(split, metric)` in fold 0.
    pub fn mean(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == "mean" && r.fold == 0 && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }
}

// ---- banks ----

/// Downstream crop of an utterance and its full layer bank.
pub fn utterance_bank(model: &CareModel, waveform: &Waveform, max_seconds: f64) -> Result<LayerBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = crop_or_pad(waveform, max_seconds, &mut rng, CropMode::Downstream)?;
    model.layer_bank(c.waveform.samples(), c.valid_samples)
}

/// Pooled banks for every entry, in order.
pub fn pooled_banks(model: &CareModel, entries: &[ManifestEntry], max_seconds: f64) -> Result<Vec<Tensor<f32>>> {
    entries
        .iter()
        .map(|e| {
            let w = e.load_audio().map_err(|err| Error::Input(format!("entry {}: {err}", e.id)))?;
            utterance_bank(model, &w, max_seconds)?.pooled()
        })
        .collect()
}

/// Cache file name for a (checkpoint, manifest, crop) triple.
pub fn bank_cache_key(checkpoint_bytes: &[u8], entries: &[ManifestEntry], max_seconds: f64) -> String {
    let mut h = Sha256::new();
    h.update(Sha256::digest(checkpoint_bytes));
    for e in entries {
        h.update(format!("{},{},{},{}\n", e.id, e.source, e.label, e.transcript).as_bytes());
    }
    h.update(max_seconds.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Pooled banks, read from or written to `cache_dir` when one is given.
pub fn cached_pooled_banks(
    model: &CareModel,
    checkpoint_bytes: &[u8],
    entries: &[ManifestEntry],
    max_seconds: f64,
    cache_dir: Option<&Path>,
) -> Result<Vec<Tensor<f32>>> {
    let Some(dir) = cache_dir else {
        return pooled_banks(model, entries, max_seconds);
    };
    let path: PathBuf = dir.join(format!("{}.bank", bank_cache_key(checkpoint_bytes, entries, max_seconds)));
    if path.exists() {
        let c = Checkpoint::read(&path)?;
        if c.tensors.len() == entries.len() && c.tensors.iter().zip(entries).all(|((n, _), e)| *n == e.id) {
            return Ok(c.tensors.into_iter().map(|(_, t)| t).collect());
        }
    }
    let banks = pooled_banks(model, entries, max_seconds)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut c = Checkpoint::new("pooled-bank-cache");
    for (e, t) in entries.iter().zip(&banks) {
        c.push(e.id.clone(), t.clone());
    }
    c.write(&path)?;
    Ok(banks)
}

// ---- similarity ----

fn pooled_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine similarity of a zero-norm pooled vector is undefined".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Pooled semantic and acoustic representations at 1-based `layer`.
fn branch_pools(model: &CareModel, w: &Waveform, layer: usize, max_seconds: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let bank = utterance_bank(model, w, max_seconds)?;
    let pairs = model.config.semantic_layers;
    if layer == 0 || layer > pairs {
        return Err(Error::Input(format!("layer {layer} outside 1..={pairs}")));
    }
    let pooled = bank.pooled()?;
    let row = pooled.row(bank.len() - pairs + layer - 1);
    let c = model.config.width;
    let f = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
    Ok((f(&row[..c]), f(&row[c..])))
}

/// `(semantic cosine, acoustic cosine)` between two utterances at `layer`.
pub fn similarity_probe(model: &CareModel, a: &Waveform, b: &Waveform, layer: usize, max_seconds: f64) -> Result<(f64, f64)> {
    let (sa, aa) = branch_pools(model, a, layer, max_seconds)?;
    let (sb, ab) = branch_pools(model, b, layer, max_seconds)?;
    Ok((pooled_cosine(&sa, &sb)?, pooled_cosine(&aa, &ab)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRow {
    pub pair_id: String,
    pub branch: &'static str,
    pub cosine: f64,
}

/// Consecutive manifest rows form pairs; the pair id is the first id without
/// its trailing `a`.
pub fn similarity_report(model: &CareModel, pairs: &[ManifestEntry], layer: usize, max_seconds: f64) -> Result<Vec<SimilarityRow>> {
    if pairs.len() % 2 != 0 {
        return Err(Error::Input(format!("pair manifest has an odd number of rows ({})", pairs.len())));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs.chunks(2) {
        let a = p[0].load_audio()?;
        let b = p[1].load_audio()?;
        let (s, ac) = similarity_probe(model, &a, &b, layer, max_seconds)?;
        let id = p[0].id.strip_suffix('a').unwrap_or(&p[0].id).to_string();
        rows.push(SimilarityRow {
            pair_id: id.clone(),
            branch: "semantic",
            cosine: s,
        });
        rows.push(SimilarityRow {
            pair_id: id,
            branch: "acoustic",
            cosine: ac,
        });
    }
    Ok(rows)
}

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut s = String::from("pair_id,branch,cosine\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.pair_id, r.branch, r.cosine);
    }
    s
}

#[cfg(test)]
mod tests;
