//! Averaging summary: a per-frame linear + ReLU layer and classifier, with
//! decisions given by the running mean of frame posteriors.

use crate::autodiff::{no_grad, ops, Real, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{Bound, Ctx};

/// Per-frame logits `[T, 2]`.
pub fn save_logits<T: Real>(cfg: &ModelConfig, p: &Bound<T>, z: &Var<T>, ctx: &mut Ctx) -> Result<Var<T>> {
    let h = ops::relu(&ops::linear(z, p.get("save.fc.w")?, p.get("save.fc.b")?)?);
    let h = ops::dropout(&h, cfg.dropout, ctx.train, &mut ctx.rng)?;
    ops::linear(&h, p.get("save.cls.w")?, p.get("save.cls.b")?)
}

pub struct SaveModel<T: Real> {
    fc_w: Var<T>,
    fc_b: Var<T>,
    cls_w: Var<T>,
    cls_b: Var<T>,
}

impl<T: Real> SaveModel<T> {
    pub fn new(p: &Bound<T>) -> Result<Self> {
        let c = |n: &str| -> Result<Var<T>> { Ok(Var::constant(p.get(n)?.to_tensor())) };
        Ok(SaveModel {
            fc_w: c("save.fc.w")?,
            fc_b: c("save.fc.b")?,
            cls_w: c("save.cls.w")?,
            cls_b: c("save.cls.b")?,
        })
    }
}

/// Running sum of frame posteriors.
pub struct SaveState {
    sum: Tensor<f64>,
    count: usize,
}

impl Default for SaveState {
    fn default() -> Self {
        SaveState {
            sum: Tensor::zeros(&[1]),
            count: 0,
        }
    }
}

impl SaveState {
    /// Consumes encoder frames `[r, d]` and returns the running mean.
    pub fn push<T: Real>(&mut self, m: &SaveModel<T>, z: &Tensor<T>) -> Result<f64> {
        no_grad(|| {
            let h = ops::relu(&ops::linear(&Var::constant(z.clone()), &m.fc_w, &m.fc_b)?);
            let logits = ops::linear(&h, &m.cls_w, &m.cls_b)?;
            drop(h);
            let lv = logits.value();
            let mut sum = self.sum.data()[0];
            for t in 0..lv.rows() {
                sum += super::posterior(lv.row(t));
            }
            self.sum.data_mut()[0] = sum;
            self.count += lv.rows();
            Ok(sum / self.count as f64)
        })
    }

    pub fn state_bytes(&self) -> usize {
        self.sum.len() * 8
    }
}
