//! Direct-definition metric implementations used to cross-check the
//! production metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ccc, uar, weighted_f1};
use crate::error::Result;

fn count(n: usize, pred: impl Fn(usize) -> bool) -> f64 {
    (0..n).filter(|&i| pred(i)).count() as f64
}

/// Per-class precision and recall, F1 as their harmonic mean, weighted by support.
pub fn weighted_f1_direct(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for c in 0..k {
        let support = count(n, |i| labels[i] == c);
        if support == 0.0 {
            continue;
        }
        let tp = count(n, |i| labels[i] == c && preds[i] == c);
        let predicted = count(n, |i| preds[i] == c);
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support / n as f64 * f1;
    }
    total
}

pub fn uar_direct(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let recalls: Vec<f64> = (0..k)
        .filter(|&c| labels.contains(&c))
        .map(|c| count(n, |i| labels[i] == c && preds[i] == c) / count(n, |i| labels[i] == c))
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// `2ρσ_gσ_p / (σ_g² + σ_p² + (μ_g − μ_p)²)` with ρ the Pearson correlation.
pub fn ccc_direct(g: &[f64], p: &[f64]) -> f64 {
    let n = g.len() as f64;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n;
    let (mg, mp) = (mean(g), mean(p));
    let sd = |x: &[f64], m: f64| (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    let (sg, sp) = (sd(g, mg), sd(p, mp));
    if sg == 0.0 || sp == 0.0 {
        return 0.0;
    }
    let cov = g.iter().zip(p).map(|(a, b)| (a - mg) * (b - mp)).sum::<f64>() / n;
    let rho = cov / (sg * sp);
    2.0 * rho * sg * sp / (sg * sg + sp * sp + (mg - mp).powi(2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub k: usize,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
    pub truth: Vec<f64>,
    pub pred_values: Vec<f64>,
}

/// A random case with `N ≤ 20`, `K ≤ 5`. Values are occasionally constant
/// or integer-valued to reach the degenerate branches.
pub fn random_case(rng: &mut ChaCha8Rng) -> OracleCase {
    let k = rng.random_range(2..=5);
    let n = rng.random_range(2..=20);
    let preds = (0..n).map(|_| rng.random_range(0..k)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    let (mg, mp) = (rng.random_range(0..10), rng.random_range(0..10));
    let mut series = |mode: u32| -> Vec<f64> {
        match mode {
            0 => vec![rng.random_range(1.0..5.0); n],
            1 => (0..n).map(|_| rng.random_range(1..=5) as f64).collect(),
            _ => (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        }
    };
    let truth = series(mg);
    let pred_values = series(mp);
    OracleCase {
        k,
        preds,
        labels,
        truth,
        pred_values,
    }
}

/// Largest disagreement per metric over `cases` random cases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSummary {
    pub cases: usize,
    pub wf1: f64,
    pub uar: f64,
    pub ccc: f64,
}

impl OracleSummary {
    pub fn max(&self) -> f64 {
        self.wf1.max(self.uar).max(self.ccc)
    }
}

pub fn compare(cases: usize, seed: u64) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleSummary {
        cases,
        wf1: 0.0,
        uar: 0.0,
        ccc: 0.0,
    };
    for _ in 0..cases {
        let c = random_case(&mut rng);
        s.wf1 = s.wf1.max((weighted_f1(&c.preds, &c.labels, c.k)? - weighted_f1_direct(&c.preds, &c.labels, c.k)).abs());
        s.uar = s.uar.max((uar(&c.preds, &c.labels, c.k)? - uar_direct(&c.preds, &c.labels, c.k)).abs());
        s.ccc = s.ccc.max((ccc(&c.truth, &c.pred_values)? - ccc_direct(&c.truth, &c.pred_values)).abs());
    }
    Ok(s)
}
