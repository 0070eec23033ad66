use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Tanh,
}

impl FromStr for UnaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Convolution padding mode.
///
/// `Same` pads `(kernel - 1) / 2` frames on the left and as many as needed on
/// the right to produce `ceil(len / stride)` outputs. The left pad does not
/// depend on the input length, so appending frames never shifts alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    RowScale(Var, Vec<T>),
    Unary(UnaryKind, Var),
    Sum(Var),
    ColMean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d(Var, Var, ConvGeom),
    MaskedMeanPool(Var, Vec<bool>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var, usize),
    Reshape(Var),
    Stack(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; leaves with `requires_grad` only.
    grad: Option<Tensor<T>>,
    /// Set once any backward pass delivered a gradient to this leaf.
    reached: bool,
}

/// Append-only reverse-mode tape.
///
/// Nodes are created in topological order, so backward is a single reverse
/// sweep. Leaf gradients accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            reached: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
            reached: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; `None` for constants and interior nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Whether a backward pass has ever delivered gradient to leaf `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.nodes[v.0].reached
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "{op}: expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op_name, self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<usize> {
        let d = *self.shape(a).last().unwrap_or(&1);
        if self.shape(b) != [d] || self.shape(a).is_empty() {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(d)
    }

    /// `a[.., D] + bias[D]` broadcast over leading dimensions.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.row_broadcast_check(a, bias, "add_row")?;
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (x, &bv) in row.iter_mut().zip(&b) {
                *x += bv;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, bias), rg))
    }

    /// `a[.., D] * gain[D]` broadcast over leading dimensions.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let d = self.row_broadcast_check(a, gain, "mul_row")?;
        let g = self.value(gain).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (x, &gv) in row.iter_mut().zip(&g) {
                *x *= gv;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(gain);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(a, gain), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddScalar(a), rg))
    }

    /// Multiplies row `i` of a 2-D tensor by the constant `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_scale")?;
        if weights.len() != r {
            return Err(shape_err("row_scale", self.shape(a), &[weights.len()]));
        }
        let mut data = self.value(a).data().to_vec();
        for (row, &w) in data.chunks_exact_mut(c).zip(&weights) {
            row.iter_mut().for_each(|x| *x *= w);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::RowScale(a, weights), rg))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let f: fn(T) -> T = match kind {
            UnaryKind::Relu => |x| if x > T::zero() { x } else { T::zero() },
            UnaryKind::Gelu => kernels::gelu,
            UnaryKind::Tanh => |x| x.tanh(),
        };
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Unary(kind, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, a)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(acc), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Column means of a 2-D tensor: `[R×D] -> [D]`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "col_mean")?;
        let mut out = vec![T::zero(); c];
        for row in self.value(a).data().chunks_exact(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::ColMean(a), rg))
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Softmax over the last axis; columns with `mask[j] == false` receive zero
    /// probability (rows with no kept column are all zero).
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let d = *self
            .shape(a)
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        if let Some(m) = mask {
            if m.len() != d {
                return Err(shape_err("softmax_rows", self.shape(a), &[m.len()]));
            }
        }
        let out = kernels::softmax_rows(self.value(a).data(), d, mask);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * d];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for (i, row) in self.value(x).data().chunks_exact(d).enumerate() {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vec![r, d], out)?, op, rg))
    }

    /// 1-D convolution of `x[T×C_in]` with `kernel[K×C_in×C_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (len, c_in) = self.dims2(x, "conv1d")?;
        let (k, kc_in, c_out) = match self.shape(kernel) {
            [k, ci, co] => (*k, *ci, *co),
            other => return Err(shape_err("conv1d", &[len, c_in], other)),
        };
        if kc_in != c_in {
            return Err(shape_err("conv1d", self.shape(x), self.shape(kernel)));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Contract("conv1d: kernel and stride must be positive".into()));
        }
        let (pad_left, out_len) = match padding {
            Padding::Valid => {
                if len < k {
                    return Err(Error::EmptyOutput {
                        op: "conv1d",
                        padded: len,
                        kernel: k,
                    });
                }
                (0, (len - k) / stride + 1)
            }
            Padding::Same => ((k - 1) / 2, len.div_ceil(stride)),
        };
        let geom = ConvGeom {
            len,
            c_in,
            c_out,
            kernel: k,
            stride,
            pad_left,
            out_len,
        };
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Tensor::new(vec![out_len, c_out], out)?, Op::Conv1d(x, kernel, geom), rg))
    }

    /// Mean over the rows of `x[T×D]` whose mask flag is set.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.dims2(x, "masked_mean_pool")?;
        if mask.len() != t {
            return Err(shape_err("masked_mean_pool", self.shape(x), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let mut out = vec![T::zero(); d];
        for (row, _) in self
            .value(x)
            .data()
            .chunks_exact(d)
            .zip(mask)
            .filter(|(_, &m)| m)
        {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(count as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![d], out)?, Op::MaskedMeanPool(x, mask.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(shape_err("slice_cols", self.shape(a), &[start, width]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, width], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows(a, start), rg))
    }

    /// Nearest-neighbour upsampling: every row repeated `factor` times.
    pub fn repeat_rows(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "repeat_rows")?;
        if factor == 0 {
            return Err(Error::Contract("repeat_rows: factor must be positive".into()));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * factor * c);
        for i in 0..r {
            for _ in 0..factor {
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r * factor, c], out)?, Op::RepeatRows(a, factor), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).numel());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(shape_err("stack", &inner, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack(parts.to_vec()), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits[N×K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), k, None);
        let mut total = T::zero();
        for (i, row) in self.value(logits).data().chunks_exact(k).enumerate() {
            let mut max = T::neg_infinity();
            for &v in row {
                max = max.max(v);
            }
            let mut s = T::zero();
            for &v in row {
                s += (v - max).exp();
            }
            total += max + s.ln() - row[labels[i]];
        }
        let value = total / T::lit(n as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(value), op, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            let (lower, _) = grads.split_at_mut(i);
            self.propagate(i, &gy, lower);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Some(acc), Some(g)) = (node.grad.as_mut(), g) {
                node.reached = true;
                for (a, v) in acc.data_mut().iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        // Returns the accumulator for `v` if it takes gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel(v)]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                if let Some(ga) = slot!(*a) {
                    kernels::matmul_nt_acc(gy, val(*b), ga, m, k, nn);
                }
                if let Some(gb) = slot!(*b) {
                    kernels::matmul_tn_acc(val(*a), gy, gb, m, k, nn);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = slot!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &bv) in ga.iter_mut().zip(gy).zip(val(*b)) {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((g, &d), &av) in gb.iter_mut().zip(gy).zip(val(*a)) {
                        *g += d * av;
                    }
                }
            }
            Op::Div(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((g, &d), &bv) in ga.iter_mut().zip(gy).zip(val(*b)) {
                        *g += d / bv;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (((g, &d), &bv), &yv) in gb.iter_mut().zip(gy).zip(val(*b)).zip(y) {
                        *g -= d * yv / bv;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let d = numel(*bias);
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &v)| *g += v);
                }
                if let Some(gb) = slot!(*bias) {
                    for row in gy.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::MulRow(a, gain) => {
                let d = numel(*gain);
                if let Some(ga) = slot!(*a) {
                    let gv = val(*gain);
                    for (grow, dyrow) in ga.chunks_exact_mut(d).zip(gy.chunks_exact(d)) {
                        for ((g, &dy), &w) in grow.iter_mut().zip(dyrow).zip(gv) {
                            *g += dy * w;
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    let av = val(*a);
                    for (arow, dyrow) in av.chunks_exact(d).zip(gy.chunks_exact(d)) {
                        for ((g, &dy), &x) in gg.iter_mut().zip(dyrow).zip(arow) {
                            *g += dy * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::RowScale(a, w) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = slot!(*a) {
                    for ((grow, dyrow), &wv) in ga.chunks_exact_mut(c).zip(gy.chunks_exact(c)).zip(w) {
                        grow.iter_mut().zip(dyrow).for_each(|(g, &d)| *g += d * wv);
                    }
                }
            }
            Op::Unary(kind, a) => {
                if let Some(ga) = slot!(*a) {
                    let x = val(*a);
                    for (((g, &d), &xv), &yv) in ga.iter_mut().zip(gy).zip(x).zip(y) {
                        let local = match kind {
                            UnaryKind::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Gelu => kernels::gelu_grad(xv),
                            UnaryKind::Tanh => T::one() - yv * yv,
                        };
                        *g += d * local;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    let d = gy[0];
                    ga.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::ColMean(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = slot!(*a) {
                    let inv = T::one() / T::lit(r as f64);
                    for grow in ga.chunks_exact_mut(c) {
                        grow.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * inv);
                    }
                }
            }
            Op::Softmax(a) => {
                let d = *self.shape(*a).last().unwrap();
                if let Some(ga) = slot!(*a) {
                    for ((grow, dyrow), yrow) in
                        ga.chunks_exact_mut(d).zip(gy.chunks_exact(d)).zip(y.chunks_exact(d))
                    {
                        let mut dot = T::zero();
                        for (&dv, &yv) in dyrow.iter().zip(yrow) {
                            dot += dv * yv;
                        }
                        for ((g, &dv), &yv) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *g += yv * (dv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = numel(*gain);
                if let Some(gx) = slot!(*x) {
                    let gv = val(*gain);
                    let inv_d = T::one() / T::lit(d as f64);
                    for (row, ((grow, dyrow), hrow)) in gx
                        .chunks_exact_mut(d)
                        .zip(gy.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = dyrow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = dyrow[j] * gv[j];
                            grow[j] += rstd[row] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (dyrow, hrow) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((g, &dv), &h) in gg.iter_mut().zip(dyrow).zip(hrow) {
                            *g += dv * h;
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for dyrow in gy.chunks_exact(d) {
                        gb.iter_mut().zip(dyrow).for_each(|(g, &dv)| *g += dv);
                    }
                }
            }
            Op::Conv1d(x, w, geom) => {
                if let Some(gx) = slot!(*x) {
                    kernels::conv1d_backward_input(gy, val(*w), geom, gx);
                }
                if let Some(gw) = slot!(*w) {
                    kernels::conv1d_backward_kernel(gy, val(*x), geom, gw);
                }
            }
            Op::MaskedMeanPool(x, mask) => {
                let d = gy.len();
                let count = mask.iter().filter(|&&m| m).count();
                if let Some(gx) = slot!(*x) {
                    let inv = T::one() / T::lit(count as f64);
                    for (grow, _) in gx.chunks_exact_mut(d).zip(mask).filter(|(_, &m)| m) {
                        grow.iter_mut().zip(gy).for_each(|(g, &dv)| *g += dv * inv);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = slot!(p) {
                        for i in 0..r {
                            let src = &gy[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a)[1];
                let w = node.value.shape()[1];
                if let Some(ga) = slot!(*a) {
                    for (i, dyrow) in gy.chunks_exact(w).enumerate() {
                        ga[i * c + start..i * c + start + w]
                            .iter_mut()
                            .zip(dyrow)
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = slot!(*a) {
                    ga[start * c..start * c + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(g, &d)| *g += d);
                }
            }
            Op::RepeatRows(a, factor) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = slot!(*a) {
                    for (i, dyrow) in gy.chunks_exact(c).enumerate() {
                        let src = i / factor;
                        ga[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(dyrow)
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Stack(parts) => {
                let inner = numel(parts[0]);
                for (k, &p) in parts.iter().enumerate() {
                    if let Some(gp) = slot!(p) {
                        gp.iter_mut()
                            .zip(&gy[k * inner..(k + 1) * inner])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                if let Some(gl) = slot!(*logits) {
                    let scale = gy[0] / T::lit(labels.len() as f64);
                    for (i, (grow, prow)) in
                        gl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate()
                    {
                        for (j, (g, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[i] { T::one() } else { T::zero() };
                            *g += scale * (p - target);
                        }
                    }
                }
            }
        }
    }
}

/// Number of outputs of a `Same`-padded convolution.
pub fn same_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}
