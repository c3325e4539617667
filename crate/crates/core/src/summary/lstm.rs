//! Unidirectional LSTM summary. Decisions average the frame posteriors of
//! the most recent `lstm_avg_frames` frames.

use crate::autodiff::kernels;
use crate::autodiff::{no_grad, ops, Real, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{Bound, Ctx};

/// Per-frame logits `[T, 2]`.
pub fn lstm_logits<T: Real>(cfg: &ModelConfig, p: &Bound<T>, z: &Var<T>, ctx: &mut Ctx) -> Result<Var<T>> {
    let xw = ops::linear(z, p.get("lstm.w_ih")?, p.get("lstm.b")?)?;
    let h = ops::lstm(&xw, p.get("lstm.w_hh")?)?;
    let h = ops::dropout(&h, cfg.dropout, ctx.train, &mut ctx.rng)?;
    ops::linear(&h, p.get("lstm.cls.w")?, p.get("lstm.cls.b")?)
}

/// Mean of the last `avg` values of `post[..upto]`, oldest first.
pub fn recent_mean(post: &[f64], upto: usize, avg: usize) -> f64 {
    let from = upto.saturating_sub(avg);
    post[from..upto].iter().sum::<f64>() / (upto - from) as f64
}

pub struct LstmModel<T: Real> {
    hidden: usize,
    avg: usize,
    w_ih: Var<T>,
    b: Var<T>,
    w_hh: Tensor<T>,
    cls_w: Var<T>,
    cls_b: Var<T>,
}

impl<T: Real> LstmModel<T> {
    pub fn new(cfg: &ModelConfig, p: &Bound<T>) -> Result<Self> {
        let c = |n: &str| -> Result<Var<T>> { Ok(Var::constant(p.get(n)?.to_tensor())) };
        Ok(LstmModel {
            hidden: cfg.lstm_hidden,
            avg: cfg.lstm_avg_frames,
            w_ih: c("lstm.w_ih")?,
            b: c("lstm.b")?,
            w_hh: p.get("lstm.w_hh")?.to_tensor(),
            cls_w: c("lstm.cls.w")?,
            cls_b: c("lstm.cls.b")?,
        })
    }
}

/// Recurrent state plus a ring of the most recent frame posteriors.
pub struct LstmState<T: Real> {
    h: Tensor<T>,
    c: Tensor<T>,
    recent: Tensor<f64>,
    seen: usize,
}

impl<T: Real> LstmState<T> {
    pub fn new(m: &LstmModel<T>) -> Self {
        LstmState {
            h: Tensor::zeros(&[1, m.hidden]),
            c: Tensor::zeros(&[m.hidden]),
            recent: Tensor::zeros(&[m.avg]),
            seen: 0,
        }
    }

    /// Consumes encoder frames `[r, d]` and returns the decision at their end.
    pub fn push(&mut self, m: &LstmModel<T>, z: &Tensor<T>) -> Result<f64> {
        no_grad(|| {
            let xw = ops::linear(&Var::constant(z.clone()), &m.w_ih, &m.b)?;
            let xw = xw.value();
            let h4 = 4 * m.hidden;
            for t in 0..z.rows() {
                let mut a = kernels::mm(self.h.data(), m.w_hh.data(), 1, m.hidden, h4);
                for (o, &x) in a.iter_mut().zip(xw.row(t)) {
                    *o += x;
                }
                kernels::lstm_cell(&mut a, self.c.data_mut(), self.h.data_mut());
                let logits = ops::linear(&Var::constant(self.h.clone()), &m.cls_w, &m.cls_b)?;
                let slot = self.seen % m.avg;
                self.recent.data_mut()[slot] = super::posterior(logits.value().row(0));
                self.seen += 1;
            }
            let n = self.seen.min(m.avg);
            let oldest = self.seen - n;
            let sum: f64 = (oldest..self.seen).map(|i| self.recent.data()[i % m.avg]).sum();
            Ok(sum / n as f64)
        })
    }

    pub fn state_bytes(&self) -> usize {
        (self.h.len() + self.c.len()) * std::mem::size_of::<T>() + self.recent.len() * 8
    }
}
