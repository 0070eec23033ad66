//! Parameterized layers shared by the encoders, teachers and probe heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Binder, Graph, Padding, ParamId, ParamStore, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

pub(crate) fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// `x · W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), normal(rng, &[d_in, d_out], std), frozen)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]), frozen)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let w = b.var(g, self.weight);
        let bias = b.var(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, frozen: bool) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::filled(&[dim], T::one()), frozen)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), frozen)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let gain = b.var(g, self.gain);
        let bias = b.var(g, self.bias);
        g.layer_norm(x, gain, bias, T::lit(NORM_EPS))
    }
}

/// Single 1-D convolution layer over a `T × C_in` sequence.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = 1.0 / ((kernel * c_in) as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), normal(rng, &[kernel, c_in, c_out], std), false)?;
        let bias = if with_bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let w = b.var(g, self.weight);
        let y = g.conv1d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(bias) => {
                let bias = b.var(g, bias);
                g.add_row(y, bias)
            }
            None => Ok(y),
        }
    }
}

/// Pre-norm transformer layer: self-attention then a 4× feed-forward block,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<Self> {
        let hidden = 4 * width;
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width, frozen)?,
            query: Linear::new(store, &format!("{name}.attn.query"), width, width, rng, frozen)?,
            key: Linear::new(store, &format!("{name}.attn.key"), width, width, rng, frozen)?,
            value: Linear::new(store, &format!("{name}.attn.value"), width, width, rng, frozen)?,
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, rng, frozen)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), width, frozen)?,
            ff_in: Linear::new(store, &format!("{name}.ff.in"), width, hidden, rng, frozen)?,
            ff_out: Linear::new(store, &format!("{name}.ff.out"), hidden, width, rng, frozen)?,
            heads,
        })
    }

    /// Padded keys (`key_mask[j] == false`) receive zero attention.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        x: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        let width = g.shape(x)[1];
        let head_dim = width / self.heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();

        let h = self.norm_attn.forward(g, b, x)?;
        let q = self.query.forward(g, b, h)?;
        let k = self.key.forward(g, b, h)?;
        let v = self.value.forward(g, b, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = g.slice_cols(q, i * head_dim, head_dim)?;
            let kh = g.slice_cols(k, i * head_dim, head_dim)?;
            let vh = g.slice_cols(v, i * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows_masked(scores, Some(key_mask))?;
            heads.push(g.matmul(attn, vh)?);
        }
        let mixed = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn_out = self.out.forward(g, b, mixed)?;
        let x = g.add(x, attn_out)?;

        let h = self.norm_ff.forward(g, b, x)?;
        let h = self.ff_in.forward(g, b, h)?;
        let h = g.gelu(h)?;
        let h = self.ff_out.forward(g, b, h)?;
        g.add(x, h)
    }

    /// Parameter ids in declaration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| [l.weight, l.bias];
        let norm = |n: &LayerNorm| [n.gain, n.bias];
        let mut ids = Vec::new();
        ids.extend(norm(&self.norm_attn));
        for l in [&self.query, &self.key, &self.value, &self.out] {
            ids.extend(lin(l));
        }
        ids.extend(norm(&self.norm_ff));
        ids.extend(lin(&self.ff_in));
        ids.extend(lin(&self.ff_out));
        ids
    }
}

/// Fixed sinusoidal position signal, `len × width`.
pub fn sinusoidal_positions<T: Real>(len: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, width], data).expect("positive extents")
}
