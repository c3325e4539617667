//! Minimal reverse-mode automatic differentiation with allocation accounting.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod ledger;
pub mod ops;
mod tensor;

pub use graph::{grad_enabled, no_grad, take_first_non_finite, Var};
pub use ledger::{measure_peak, AllocationLedger};
pub use tensor::{lit, DType, Real, Tensor};

/// Global L2 norm over a set of gradients.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / g` when the global norm `g`
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn grad_clip_by_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = lit::<T>(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
