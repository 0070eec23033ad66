//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ − lr·wd·θ
//! m ← β₁m + (1 − β₁)g
//! v ← β₂v + (1 − β₂)g²
//! θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```
//!
//! Parameters without a gradient (unreachable from the loss) and frozen
//! parameters are left untouched, including by weight decay.

use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: per-parameter moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        let i = id.index();
        self.m[i].as_ref().zip(self.v[i].as_ref())
    }

    /// Restores saved state (checkpoint resume).
    pub fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor<T>, Tensor<T>)>>) -> Result<()> {
        if moments.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer restore: {} moment slots for {} parameters",
                moments.len(),
                self.m.len()
            )));
        }
        self.step = step;
        for (i, mv) in moments.into_iter().enumerate() {
            let (m, v) = match mv {
                Some((m, v)) => (Some(m), Some(v)),
                None => (None, None),
            };
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// One update. Rejects the whole step, leaving parameters and state
    /// untouched, if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "adamw: {} gradients / {} slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            let Some(g) = g else { continue };
            let p = store.get(id);
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}`; optimizer step rejected"
            )));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eps = T::lit(c.eps);
        let decay = T::one() - T::lit(c.lr * c.weight_decay);
        let bc1 = T::one() - T::lit(c.beta1).powi(t);
        let bc2 = T::one() - T::lit(c.beta2).powi(t);

        for (id, param) in store.iter_mut() {
            if param.frozen {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let shape = param.value.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let theta = param.value.data_mut();
            for (((th, &gv), mv), vv) in theta
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *th *= decay;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *th -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
