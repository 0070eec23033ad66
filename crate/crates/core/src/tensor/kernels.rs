//! Slice-level loops shared by the forward and backward passes.
//!
//! Accumulation order is fixed by loop nesting; nothing here reorders sums.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += dy[m×n] · b[k×n]ᵀ`
pub fn matmul_nt_acc<T: Real>(dy: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&d, &bv) in dy_row.iter().zip(b_row) {
                acc += d * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · dy[m×n]`
pub fn matmul_tn_acc<T: Real>(a: &[T], dy: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &d) in out_row.iter_mut().zip(dy_row) {
                *o += aip * d;
            }
        }
    }
}

/// Geometry of a 1-D convolution over a `len × c_in` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    /// Input row feeding output `t` through tap `k`, if it lies inside the input.
    #[inline]
    fn src(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k).checked_sub(self.pad_left)?;
        (pos < self.len).then_some(pos)
    }
}

pub fn conv1d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_len * g.c_out];
    for t in 0..g.out_len {
        let out_row = &mut out[t * g.c_out..(t + 1) * g.c_out];
        for k in 0..g.kernel {
            let Some(pos) = g.src(t, k) else { continue };
            let x_row = &x[pos * g.c_in..(pos + 1) * g.c_in];
            for (ci, &xv) in x_row.iter().enumerate() {
                let w_row = &w[(k * g.c_in + ci) * g.c_out..(k * g.c_in + ci + 1) * g.c_out];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

pub fn conv1d_backward_input<T: Real>(dy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    for t in 0..g.out_len {
        let dy_row = &dy[t * g.c_out..(t + 1) * g.c_out];
        for k in 0..g.kernel {
            let Some(pos) = g.src(t, k) else { continue };
            for ci in 0..g.c_in {
                let w_row = &w[(k * g.c_in + ci) * g.c_out..(k * g.c_in + ci + 1) * g.c_out];
                let mut acc = T::zero();
                for (&d, &wv) in dy_row.iter().zip(w_row) {
                    acc += d * wv;
                }
                dx[pos * g.c_in + ci] += acc;
            }
        }
    }
}

pub fn conv1d_backward_kernel<T: Real>(dy: &[T], x: &[T], g: &ConvGeom, dw: &mut [T]) {
    for t in 0..g.out_len {
        let dy_row = &dy[t * g.c_out..(t + 1) * g.c_out];
        for k in 0..g.kernel {
            let Some(pos) = g.src(t, k) else { continue };
            for ci in 0..g.c_in {
                let xv = x[pos * g.c_in + ci];
                let dw_row = &mut dw[(k * g.c_in + ci) * g.c_out..(k * g.c_in + ci + 1) * g.c_out];
                for (o, &d) in dw_row.iter_mut().zip(dy_row) {
                    *o += xv * d;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Row-wise softmax of a `rows × cols` block; masked-out columns get zero mass.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row_in, row_out) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row_in.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        for (j, (&v, o)) in row_in.iter().zip(row_out.iter_mut()).enumerate() {
            if keep(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in row_out.iter_mut() {
            *o /= total;
        }
    }
    out
}
