//! Central finite-difference check of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ops, Tensor, Var};
use crate::error::{FtmError, Result};

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)` at the worst entry.
    pub max_rel_err: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Compares the gradient of the scalar `f(inputs)` with central differences
/// of step `h` for every entry of every input.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
) -> Result<GradCheckReport> {
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    let out = f(&vars)?;
    if out.value().len() != 1 {
        return Err(FtmError::shape("check_gradients", &out.shape(), &[1]));
    }
    out.backward()?;
    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let vs: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                Var::constant(t)
            })
            .collect();
        Ok(f(&vs)?.item())
    };
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, v) in vars.iter().enumerate() {
        let grad = v.grad().unwrap_or_else(|| Tensor::zeros(v.value().shape()));
        for idx in 0..grad.len() {
            let numeric = (eval(i, idx, h)? - eval(i, idx, -h)?) / (2.0 * h);
            let analytic = grad.data()[idx];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if err >= worst.max_rel_err {
                worst = GradCheckReport {
                    max_rel_err: err,
                    input: i,
                    index: idx,
                    analytic,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// Reduces `v` to a scalar through fixed pseudo-random weights so every
/// output entry contributes a distinct amount.
pub fn random_projection(v: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    Ok(ops::sum_all(&ops::mul(v, &Var::constant(w))?))
}

/// Scalar function of the inputs under test.
pub type GradFn = Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>;

/// One named gradient-check case.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: GradFn,
}

/// Uniform(-1, 1) tensor.
pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinked ops stay differentiable.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_t(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn proj(v: Result<Var<f64>>, seed: u64) -> Result<Var<f64>> {
    random_projection(&v?, seed)
}

/// Every differentiable primitive on randomized shapes, each reduced to a
/// scalar, ready for [`check_gradients`]. Inputs of kinked ops are kept away
/// from their kinks.
pub fn primitive_suite(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let m = rng.random_range(2..5);
    let k = rng.random_range(2..5);
    let n = rng.random_range(2..5);
    let t = rng.random_range(6..10);
    let mask: Vec<bool> = (0..m * n).map(|i| i % n <= i / n % n || i % n == 0).collect();
    let labels: Vec<usize> = (0..m).map(|i| i % n).collect();
    let weights: Vec<f64> = (0..m).map(|i| 0.5 + i as f64 * 0.25).collect();
    let idx = vec![m - 1, 0, m - 1];
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, GradFn)> = vec![
        ("matmul", vec![rand_t(rng, &[m, k]), rand_t(rng, &[k, n])], Box::new(|v: &[Var<f64>]| proj(ops::matmul(&v[0], &v[1]), 1))),
        ("matmul_nt", vec![rand_t(rng, &[m, k]), rand_t(rng, &[n, k])], Box::new(|v: &[Var<f64>]| proj(ops::matmul_nt(&v[0], &v[1]), 2))),
        ("linear", vec![rand_t(rng, &[m, k]), rand_t(rng, &[k, n]), rand_t(rng, &[n])], Box::new(|v: &[Var<f64>]| proj(ops::linear(&v[0], &v[1], &v[2]), 3))),
        ("transpose", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::transpose(&v[0]), 4))),
        ("add", vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::add(&v[0], &v[1]), 5))),
        ("sub", vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::sub(&v[0], &v[1]), 6))),
        ("mul", vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::mul(&v[0], &v[1]), 7))),
        ("scale", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(Ok(ops::scale(&v[0], -1.7)), 8))),
        ("add_row", vec![rand_t(rng, &[m, n]), rand_t(rng, &[n])], Box::new(|v: &[Var<f64>]| proj(ops::add_row(&v[0], &v[1]), 9))),
        ("relu", vec![off_zero(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(Ok(ops::relu(&v[0])), 10))),
        ("sigmoid", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(Ok(ops::sigmoid(&v[0])), 11))),
        ("tanh", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(Ok(ops::tanh(&v[0])), 12))),
        (
            "dropout",
            vec![rand_t(rng, &[m, n])],
            Box::new(|v: &[Var<f64>]| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                proj(ops::dropout(&v[0], 0.3, true, &mut r), 13)
            }),
        ),
        ("concat_rows", vec![rand_t(rng, &[m, n]), rand_t(rng, &[k, n])], Box::new(|v: &[Var<f64>]| proj(ops::concat_rows(&[v[0].clone(), v[1].clone()]), 14))),
        ("concat_cols", vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, k])], Box::new(|v: &[Var<f64>]| proj(ops::concat_cols(&[v[0].clone(), v[1].clone()]), 15))),
        ("slice_rows", vec![rand_t(rng, &[m + 2, n])], Box::new(move |v: &[Var<f64>]| proj(ops::slice_rows(&v[0], 1, m + 1), 16))),
        ("slice_cols", vec![rand_t(rng, &[m, n + 2])], Box::new(move |v: &[Var<f64>]| proj(ops::slice_cols(&v[0], 1, n + 1), 17))),
        ("gather_rows", vec![rand_t(rng, &[m, n])], Box::new(move |v: &[Var<f64>]| proj(ops::gather_rows(&v[0], &idx), 18))),
        ("pad_rows", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::pad_rows(&v[0], 2, 3), 19))),
        ("sum_all", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| Ok(ops::sum_all(&ops::mul(&v[0], &v[0])?)))),
        ("mean_all", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| Ok(ops::mean_all(&ops::mul(&v[0], &v[0])?)))),
        ("mean_rows", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::mean(&v[0], 0), 20))),
        ("mean_cols", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::mean(&v[0], 1), 21))),
        ("softmax", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::softmax(&v[0]), 22))),
        ("masked_softmax", vec![rand_t(rng, &[m, n])], Box::new(move |v: &[Var<f64>]| proj(ops::masked_softmax(&v[0], Some(&mask)), 23))),
        ("log_softmax", vec![rand_t(rng, &[m, n])], Box::new(|v: &[Var<f64>]| proj(ops::log_softmax(&v[0]), 24))),
        (
            "layer_norm",
            vec![rand_t(rng, &[m, n + 1]), rand_t(rng, &[n + 1]), rand_t(rng, &[n + 1])],
            Box::new(|v: &[Var<f64>]| proj(ops::layer_norm(&v[0], &v[1], &v[2], 1e-5), 25)),
        ),
        ("weight_norm", vec![rand_t(rng, &[m, k]), rand_t(rng, &[m])], Box::new(|v: &[Var<f64>]| proj(ops::weight_norm(&v[0], &v[1]), 26))),
        (
            "conv1d_strided",
            vec![rand_t(rng, &[t, k]), rand_t(rng, &[n, 3 * k]), rand_t(rng, &[n])],
            Box::new(|v: &[Var<f64>]| proj(ops::conv1d_strided(&v[0], &v[1], &v[2], 3, 2, 1), 27)),
        ),
        (
            "relative_bias",
            vec![rand_t(rng, &[2, 7])],
            Box::new(|v: &[Var<f64>]| proj(ops::relative_bias(&v[0], 1, &[3, 4, 5], &[0, 1, 2, 3, 4, 5], 3), 28)),
        ),
        (
            "masked_attention_scores",
            vec![rand_t(rng, &[m, k]), rand_t(rng, &[n, k]), rand_t(rng, &[m, n])],
            Box::new(|v: &[Var<f64>]| {
                let (m, n) = (v[0].shape()[0], v[1].shape()[0]);
                let mask: Vec<bool> = (0..m * n).map(|i| i % n <= i / n).collect();
                proj(ops::masked_attention_scores(&v[0], &v[1], Some(&v[2]), Some(&mask), 0.6), 29)
            }),
        ),
        (
            "cross_entropy",
            vec![rand_t(rng, &[m, n])],
            Box::new(move |v: &[Var<f64>]| ops::cross_entropy(&v[0], &labels, Some(&weights))),
        ),
        (
            "lstm",
            vec![rand_t(rng, &[t, 4 * k]), rand_t(rng, &[k, 4 * k])],
            Box::new(|v: &[Var<f64>]| proj(ops::lstm(&v[0], &v[1]), 30)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| GradCase { name, inputs, f })
        .collect()
}
