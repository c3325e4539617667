//! Training objectives: frame-wise cross-entropy for the discriminative
//! branch, CTC for the phonetic branch, and their weighted sum.

use crate::autodiff::kernels::log_add;
use crate::autodiff::{lit, ops, Real, Tensor, Var};
use crate::error::{FtmError, Result};

/// CTC blank symbol.
pub const BLANK: usize = 0;

/// Phone label sequence; symbols lie in `1..=alphabet`, 0 is the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneLabels {
    symbols: Vec<usize>,
}

impl PhoneLabels {
    pub fn new(symbols: Vec<usize>, alphabet: usize) -> Result<Self> {
        if let Some(&bad) = symbols.iter().find(|&&s| s == BLANK || s > alphabet) {
            return Err(FtmError::Data(format!("phone id {bad} outside 1..={alphabet}")));
        }
        Ok(PhoneLabels { symbols })
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Fewest frames any alignment needs: one per label plus a blank between
    /// each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.symbols.len() + self.symbols.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Mean over frames of `−log softmax(logits)[label]`, optionally weighted
/// per frame.
pub fn frame_xe<T: Real>(logits: &Var<T>, label: usize, weights: Option<&[T]>) -> Result<Var<T>> {
    if label > 1 {
        return Err(FtmError::Data(format!("binary label expected, got {label}")));
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(FtmError::shape("frame_xe", &shape, &[0, 2]));
    }
    ops::cross_entropy(logits, &vec![label; shape[0]], weights)
}

/// `xe + lambda_ctc · ctc`.
pub fn multitask_loss<T: Real>(xe: &Var<T>, ctc: &Var<T>, lambda_ctc: f64) -> Result<Var<T>> {
    if lambda_ctc < 0.0 {
        return Err(FtmError::Config(format!("lambda_ctc {lambda_ctc} must be non-negative")));
    }
    ops::add(xe, &ops::scale(ctc, lit(lambda_ctc)))
}

fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Log-space forward variables `α[t][s]` over the blank-extended labels.
fn forward_vars<T: Real>(lp: &Tensor<T>, ext: &[usize]) -> Vec<Vec<T>> {
    let (t_len, n) = (lp.rows(), ext.len());
    let ninf = T::neg_infinity();
    let mut alpha = vec![vec![ninf; n]; t_len];
    alpha[0][0] = lp.at(0, ext[0]);
    if n > 1 {
        alpha[0][1] = lp.at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..n {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == ninf { ninf } else { acc + lp.at(t, ext[s]) };
        }
    }
    alpha
}

/// Log-space backward variables excluding the emission at `t`.
fn backward_vars<T: Real>(lp: &Tensor<T>, ext: &[usize]) -> Vec<Vec<T>> {
    let (t_len, n) = (lp.rows(), ext.len());
    let ninf = T::neg_infinity();
    let mut beta = vec![vec![ninf; n]; t_len];
    beta[t_len - 1][n - 1] = T::zero();
    if n > 1 {
        beta[t_len - 1][n - 2] = T::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..n {
            let step = |s2: usize| beta[t + 1][s2] + lp.at(t + 1, ext[s2]);
            let mut acc = step(s);
            if s + 1 < n {
                acc = log_add(acc, step(s + 1));
            }
            if s + 2 < n && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, step(s + 2));
            }
            beta[t][s] = acc;
        }
    }
    beta
}

/// Negative log-likelihood of `labels` under per-frame log-distributions
/// `log_probs` (`[T, alphabet + 1]`, blank at column 0), summed over every
/// alignment that collapses to the labels.
pub fn ctc_loss<T: Real>(log_probs: &Var<T>, labels: &PhoneLabels) -> Result<Var<T>> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(FtmError::shape("ctc_loss", &shape, &[0, 0]));
    }
    let (t_len, n_sym) = (shape[0], shape[1]);
    if let Some(&bad) = labels.symbols().iter().find(|&&s| s >= n_sym) {
        return Err(FtmError::Data(format!("phone id {bad} outside the {n_sym}-column distribution")));
    }
    if labels.is_empty() {
        return Err(FtmError::Empty("ctc_loss needs a non-empty label sequence".into()));
    }
    if labels.min_frames() > t_len {
        return Err(FtmError::Data("label longer than admissible alignment".into()));
    }
    let ext = extended(labels.symbols());
    let (alpha, log_p) = {
        let lp = log_probs.value();
        let alpha = forward_vars(&lp, &ext);
        let n = ext.len();
        let log_p = log_add(alpha[t_len - 1][n - 1], alpha[t_len - 1][n - 2]);
        (alpha, log_p)
    };
    if !log_p.is_finite() {
        return Err(FtmError::NonFinite("CTC likelihood underflowed".into()));
    }
    Ok(Var::from_op(
        "ctc_loss",
        Tensor::scalar(-log_p),
        vec![log_probs.clone()],
        move |g, p, _| {
            let lp = p[0].value();
            let beta = backward_vars(&lp, &ext);
            let mut d = vec![T::zero(); t_len * n_sym];
            for t in 0..t_len {
                for (s, &k) in ext.iter().enumerate() {
                    let lv = alpha[t][s] + beta[t][s];
                    if lv.is_finite() {
                        d[t * n_sym + k] -= (lv - log_p).exp();
                    }
                }
            }
            let gs = g.item();
            d.iter_mut().for_each(|x| *x *= gs);
            vec![Some(Tensor::raw(vec![t_len, n_sym], d))]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(rows: &[&[f64]]) -> Var<f64> {
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Var::param(Tensor::from_rows(&probs).unwrap())
    }

    #[test]
    fn single_frame_single_label() {
        let x = lp(&[&[0.2, 0.5, 0.3]]);
        let l = ctc_loss(&x, &PhoneLabels::new(vec![1], 2).unwrap()).unwrap();
        assert!((l.item() + 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_frames_three_paths() {
        let (b1, a1, b2, a2) = (0.3, 0.6, 0.25, 0.7);
        let x = lp(&[&[b1, a1, 1.0 - b1 - a1], &[b2, a2, 1.0 - b2 - a2]]);
        let l = ctc_loss(&x, &PhoneLabels::new(vec![1], 2).unwrap()).unwrap();
        let expect = -(a1 * a2 + a1 * b2 + b1 * a2).ln();
        assert!((l.item() - expect).abs() < 1e-14);
    }

    #[test]
    fn too_short_is_an_error() {
        let x = lp(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let err = ctc_loss(&x, &PhoneLabels::new(vec![1, 1], 1).unwrap()).unwrap_err();
        assert_eq!(err.to_string(), "data error: label longer than admissible alignment");
        assert!(PhoneLabels::new(vec![0], 3).is_err());
    }

    #[test]
    fn frame_xe_cases() {
        let uniform = Var::<f64>::param(Tensor::zeros(&[4, 2]));
        assert!((frame_xe(&uniform, 1, None).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
        let sure = Var::<f64>::param(Tensor::from_rows(&[vec![-900.0, 900.0]]).unwrap());
        assert_eq!(frame_xe(&sure, 1, None).unwrap().item(), 0.0);
        assert!(frame_xe(&sure, 2, None).is_err());
    }

    #[test]
    fn multitask_weighting() {
        let xe = Var::<f64>::param(Tensor::scalar(0.7));
        let ctc = Var::<f64>::param(Tensor::scalar(2.0));
        assert_eq!(multitask_loss(&xe, &ctc, 0.0).unwrap().item(), 0.7);
        assert_eq!(multitask_loss(&xe, &ctc, 1.0).unwrap().item(), 2.7);
        assert!(multitask_loss(&xe, &ctc, -1.0).is_err());
    }
}
