//! Central-difference gradient verification in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Padding, Tensor, UnaryKind, Var};
use crate::error::{Error, Result};

/// Max over every coordinate of every input of
/// `|analytic − central difference| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract("gradcheck function must be scalar".into()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck input {k} coordinate {i}: analytic {a}, numeric {numeric}"
                )));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradcheck`].
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck(|g, v| f(g, v[0]), std::slice::from_ref(x), h)
}

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Random inputs bounded away from zero, for checking kinked maps.
fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct gradient.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone().reshaped(g.shape(out))?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Finite-difference errors for every primitive on the tape.
pub fn primitive_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut results = Vec::new();

    macro_rules! check {
        ($name:expr, $inputs:expr, $out_numel:expr, |$g:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor<f64>> = $inputs;
            let w = randn(&mut rng, &[$out_numel]);
            let err = gradcheck(
                |$g, $v| {
                    let out = $body?;
                    project($g, out, &w)
                },
                &inputs,
                h,
            )?;
            results.push(($name.to_string(), err));
        }};
    }

    check!("matmul", vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2])], 6, |g, v| g
        .matmul(v[0], v[1]));
    check!("transpose", vec![randn(&mut rng, &[3, 4])], 12, |g, v| g.transpose(v[0]));
    check!("add", vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])], 6, |g, v| g
        .add(v[0], v[1]));
    check!("sub", vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])], 6, |g, v| g
        .sub(v[0], v[1]));
    check!("mul", vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])], 6, |g, v| g
        .mul(v[0], v[1]));
    check!(
        "div",
        vec![randn(&mut rng, &[2, 3]), {
            let mut d = randn(&mut rng, &[2, 3]);
            d.data_mut().iter_mut().for_each(|x| *x = x.abs() + 1.0);
            d
        }],
        6,
        |g, v| g.div(v[0], v[1])
    );
    check!("add_row", vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4])], 12, |g, v| g
        .add_row(v[0], v[1]));
    check!("mul_row", vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4])], 12, |g, v| g
        .mul_row(v[0], v[1]));
    check!("scale", vec![randn(&mut rng, &[5])], 5, |g, v| g.scale(v[0], -1.7));
    check!("add_scalar", vec![randn(&mut rng, &[5])], 5, |g, v| g.add_scalar(v[0], 0.3));
    check!("row_scale", vec![randn(&mut rng, &[3, 2])], 6, |g, v| g
        .row_scale(v[0], vec![1.0, 0.0, 2.5]));
    check!("relu", vec![randn_away_from_zero(&mut rng, &[8])], 8, |g, v| g
        .unary(UnaryKind::Relu, v[0]));
    check!("gelu", vec![randn(&mut rng, &[8])], 8, |g, v| g.unary(UnaryKind::Gelu, v[0]));
    check!("tanh", vec![randn(&mut rng, &[8])], 8, |g, v| g.unary(UnaryKind::Tanh, v[0]));
    check!("sum", vec![randn(&mut rng, &[2, 3])], 1, |g, v| g.sum(v[0]));
    check!("col_mean", vec![randn(&mut rng, &[4, 3])], 3, |g, v| g.col_mean(v[0]));
    check!("softmax_rows", vec![randn(&mut rng, &[3, 5])], 15, |g, v| g
        .softmax_rows(v[0]));
    check!("softmax_rows_masked", vec![randn(&mut rng, &[3, 5])], 15, |g, v| g
        .softmax_rows_masked(v[0], Some(&[true, false, true, true, false])));
    check!(
        "layer_norm",
        vec![randn(&mut rng, &[3, 6]), randn(&mut rng, &[6]), randn(&mut rng, &[6])],
        18,
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)
    );
    check!("conv1d_same_s1", vec![randn(&mut rng, &[7, 3]), randn(&mut rng, &[5, 3, 2])], 14, |g, v| g
        .conv1d(v[0], v[1], 1, Padding::Same));
    check!("conv1d_same_s3", vec![randn(&mut rng, &[10, 2]), randn(&mut rng, &[5, 2, 3])], 12, |g, v| g
        .conv1d(v[0], v[1], 3, Padding::Same));
    check!("conv1d_valid_s2", vec![randn(&mut rng, &[9, 2]), randn(&mut rng, &[3, 2, 2])], 8, |g, v| g
        .conv1d(v[0], v[1], 2, Padding::Valid));
    check!("masked_mean_pool", vec![randn(&mut rng, &[4, 3])], 3, |g, v| g
        .masked_mean_pool(v[0], &[true, true, false, true]));
    check!("concat_cols", vec![randn(&mut rng, &[3, 2]), randn(&mut rng, &[3, 4])], 18, |g, v| g
        .concat_cols(&[v[0], v[1]]));
    check!("slice_cols", vec![randn(&mut rng, &[3, 5])], 6, |g, v| g.slice_cols(v[0], 1, 2));
    check!("slice_rows", vec![randn(&mut rng, &[5, 2])], 6, |g, v| g.slice_rows(v[0], 1, 3));
    check!("repeat_rows", vec![randn(&mut rng, &[3, 2])], 18, |g, v| g.repeat_rows(v[0], 3));
    check!("reshape", vec![randn(&mut rng, &[2, 3])], 6, |g, v| g.reshape(v[0], &[3, 2]));
    check!("stack", vec![randn(&mut rng, &[3]), randn(&mut rng, &[3])], 6, |g, v| g
        .stack(&[v[0], v[1]]));
    check!("cross_entropy", vec![randn(&mut rng, &[4, 3])], 1, |g, v| g
        .cross_entropy(v[0], &[0, 2, 1, 2]));

    Ok(results)
}
