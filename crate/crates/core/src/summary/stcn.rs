//! Streaming TCN summary: a residual unit whose receptive field is one 2S
//! attention block and whose stride is one shift S.
//!
//! The first convolution (k1 = s1) condenses non-overlapping groups of
//! frames; the second (k2, s2) spans the 2S block ending at each shift
//! boundary. The skip path projects the last frame of each block.

use crate::autodiff::{no_grad, ops, Real, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{FtmError, Result};
use crate::model::{Bound, Ctx};

/// Rows handed to the unit: right-padded with the last frame to a multiple of
/// S, then left-padded with the first frame up to at least 2S.
pub fn stcn_input<T: Real>(z: &Var<T>, s: usize) -> Result<Var<T>> {
    let t = z.value().rows();
    if t == 0 {
        return Err(FtmError::Empty("s-TCN input has no frames".into()));
    }
    let n = t.div_ceil(s);
    let z = ops::pad_rows(z, 0, n * s - t)?;
    if n < 2 {
        ops::pad_rows(&z, s, 0)
    } else {
        Ok(z)
    }
}

/// Emission frames for a `t`-frame input: every shift boundary from 2S on,
/// with the last one clipped to `t`. Inputs shorter than 2S emit once at `t`.
pub fn stcn_emission_times(t: usize, s: usize) -> Vec<usize> {
    let n = t.div_ceil(s);
    if n < 2 {
        return vec![t];
    }
    (2..=n).map(|j| (j * s).min(t)).collect()
}

/// One residual unit over `x`. Unit 0 consumes `[L, d]` encoder frames
/// (L a multiple of S, at least 2S) and returns `[L/S − 1, c]`, one row per
/// shift; later units are pointwise over those rows.
pub fn stcn_unit<T: Real>(cfg: &ModelConfig, p: &Bound<T>, unit: usize, x: &Var<T>, ctx: &mut Ctx) -> Result<Var<T>> {
    let pre = format!("stcn.{unit}");
    let conv = |name: &str, x: &Var<T>, k: usize, stride: usize, ctx: &mut Ctx| -> Result<Var<T>> {
        let w = ops::weight_norm(p.get(&format!("{pre}.{name}.v"))?, p.get(&format!("{pre}.{name}.g"))?)?;
        let y = ops::conv1d_strided(x, &w, p.get(&format!("{pre}.{name}.b"))?, k, stride, 0)?;
        ops::dropout(&ops::relu(&y), cfg.dropout, ctx.train, &mut ctx.rng)
    };
    let (rows, skip_in) = if unit == 0 {
        let s = cfg.block_shift;
        let l = x.value().rows();
        if !l.is_multiple_of(s) || l < 2 * s {
            return Err(FtmError::shape("stcn_unit", &x.shape(), &[2 * s, cfg.d_model]));
        }
        let h1 = conv("conv1", x, cfg.k1, cfg.s1, ctx)?;
        // Drop leading positions so every window ends on a shift boundary.
        let offset = 2 * cfg.s2 - cfg.k2;
        let h1 = ops::slice_rows(&h1, offset, h1.value().rows())?;
        let h2 = conv("conv2", &h1, cfg.k2, cfg.s2, ctx)?;
        let last: Vec<usize> = (2..=l / s).map(|j| j * s - 1).collect();
        (h2, ops::gather_rows(x, &last)?)
    } else {
        let h1 = conv("conv1", x, 1, 1, ctx)?;
        (conv("conv2", &h1, 1, 1, ctx)?, x.clone())
    };
    let skip = ops::linear(&skip_in, p.get(&format!("{pre}.skip.w"))?, p.get(&format!("{pre}.skip.b"))?)?;
    Ok(ops::relu(&ops::add(&rows, &skip)?))
}

/// Per-emission logits `[n_emit, 2]` for encoder output `z`.
pub fn stcn_logits<T: Real>(cfg: &ModelConfig, p: &Bound<T>, z: &Var<T>, ctx: &mut Ctx) -> Result<Var<T>> {
    let mut h = stcn_unit(cfg, p, 0, &stcn_input(z, cfg.block_shift)?, ctx)?;
    for unit in 1..cfg.tcn_units {
        h = stcn_unit(cfg, p, unit, &h, ctx)?;
    }
    ops::linear(&h, p.get("stcn.cls.w")?, p.get("stcn.cls.b")?)
}

struct PointwiseUnit<T: Real> {
    w1: Var<T>,
    b1: Var<T>,
    w2: Var<T>,
    b2: Var<T>,
    skip_w: Var<T>,
    skip_b: Var<T>,
}

/// Inference weights with weight norm folded into plain kernels, and the
/// second kernel split into the taps that read the previous shift window
/// (`w2_early`) and those that read the current one (`w2_late`).
pub struct StcnModel<T: Real> {
    s: usize,
    k1: usize,
    early_taps: usize,
    c: usize,
    w1: Var<T>,
    b1: Var<T>,
    w2_early: Option<Var<T>>,
    w2_late: Var<T>,
    b2: Var<T>,
    skip_w: Var<T>,
    skip_b: Var<T>,
    extra: Vec<PointwiseUnit<T>>,
    cls_w: Var<T>,
    cls_b: Var<T>,
}

fn folded<T: Real>(p: &Bound<T>, pre: &str) -> Result<Var<T>> {
    let w = ops::weight_norm(p.get(&format!("{pre}.v"))?, p.get(&format!("{pre}.g"))?)?;
    Ok(Var::constant(w.to_tensor()))
}

fn cst<T: Real>(p: &Bound<T>, name: &str) -> Result<Var<T>> {
    Ok(Var::constant(p.get(name)?.to_tensor()))
}

fn cols<T: Real>(w: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let data = (0..w.rows()).flat_map(|r| w.row(r)[start..end].to_vec()).collect();
    Tensor::raw(vec![w.rows(), end - start], data)
}

impl<T: Real> StcnModel<T> {
    pub fn new(cfg: &ModelConfig, p: &Bound<T>) -> Result<Self> {
        cfg.validate()?;
        no_grad(|| {
            let c = cfg.tcn_channels;
            let early_taps = cfg.k2 - cfg.s2;
            let w2 = folded(p, "stcn.0.conv2")?.to_tensor();
            let extra = (1..cfg.tcn_units)
                .map(|u| {
                    Ok(PointwiseUnit {
                        w1: folded(p, &format!("stcn.{u}.conv1"))?,
                        b1: cst(p, &format!("stcn.{u}.conv1.b"))?,
                        w2: folded(p, &format!("stcn.{u}.conv2"))?,
                        b2: cst(p, &format!("stcn.{u}.conv2.b"))?,
                        skip_w: cst(p, &format!("stcn.{u}.skip.w"))?,
                        skip_b: cst(p, &format!("stcn.{u}.skip.b"))?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(StcnModel {
                s: cfg.block_shift,
                k1: cfg.k1,
                early_taps,
                c,
                w1: folded(p, "stcn.0.conv1")?,
                b1: cst(p, "stcn.0.conv1.b")?,
                w2_early: (early_taps > 0).then(|| Var::constant(cols(&w2, 0, early_taps * c))),
                w2_late: Var::constant(cols(&w2, early_taps * c, cfg.k2 * c)),
                b2: cst(p, "stcn.0.conv2.b")?,
                skip_w: cst(p, "stcn.0.skip.w")?,
                skip_b: cst(p, "stcn.0.skip.b")?,
                extra,
                cls_w: cst(p, "stcn.cls.w")?,
                cls_b: cst(p, "stcn.cls.b")?,
            })
        })
    }

    /// First-convolution outputs `[S/k1, c]` for one full window.
    fn conv1(&self, z: &Var<T>) -> Result<Var<T>> {
        Ok(ops::relu(&ops::conv1d_strided(z, &self.w1, &self.b1, self.k1, self.k1, 0)?))
    }

    /// Contribution of `rows` (`[n, c]`) through kernel part `w` (`[c, n·c]`).
    fn taps(&self, rows: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let n = rows.value().rows();
        let flat = Var::constant(rows.to_tensor().reshape(&[1, n * self.c])?);
        ops::matmul_nt(&flat, w)
    }

    fn early(&self, h1: &Var<T>) -> Result<Option<Var<T>>> {
        match &self.w2_early {
            Some(w) => {
                let n = h1.value().rows();
                Ok(Some(self.taps(&ops::slice_rows(h1, n - self.early_taps, n)?, w)?))
            }
            None => Ok(None),
        }
    }

    fn score(&self, partial: Option<&Var<T>>, h1: &Var<T>, last_frame: &Var<T>) -> Result<f64> {
        let mut pre = self.taps(h1, &self.w2_late)?;
        if let Some(pp) = partial {
            pre = ops::add(pp, &pre)?;
        }
        let h2 = ops::relu(&ops::add_row(&pre, &self.b2)?);
        let skip = ops::linear(last_frame, &self.skip_w, &self.skip_b)?;
        let mut h = ops::relu(&ops::add(&h2, &skip)?);
        for u in &self.extra {
            let a = ops::relu(&ops::matmul_nt(&h, &u.w1).and_then(|y| ops::add_row(&y, &u.b1))?);
            let b = ops::relu(&ops::matmul_nt(&a, &u.w2).and_then(|y| ops::add_row(&y, &u.b2))?);
            let sk = ops::linear(&h, &u.skip_w, &u.skip_b)?;
            h = ops::relu(&ops::add(&b, &sk)?);
        }
        let logits = ops::linear(&h, &self.cls_w, &self.cls_b)?;
        let v = logits.value();
        Ok(super::posterior(v.row(0)))
    }
}

/// Incremental s-TCN state: the second convolution's partial sum from the
/// previous window, plus the candidate decision of the first window (only
/// emitted if the stream ends there).
pub struct StcnState<T: Real> {
    partial: Option<Tensor<T>>,
    pending_first: Option<f64>,
    windows: usize,
}

impl<T: Real> Default for StcnState<T> {
    fn default() -> Self {
        StcnState {
            partial: None,
            pending_first: None,
            windows: 0,
        }
    }
}

impl<T: Real> StcnState<T> {
    /// Consumes one window of at most S encoder frames; a short window ends
    /// the stream. Returns the decision emitted at the end of the window.
    pub fn push(&mut self, m: &StcnModel<T>, z: &Tensor<T>, closes: bool) -> Result<Option<f64>> {
        no_grad(|| {
            let r = z.rows();
            let z = Var::constant(z.clone());
            let z = ops::pad_rows(&z, 0, m.s - r)?;
            let h1 = m.conv1(&z)?;
            if self.windows == 0 {
                // Stream head: the previous window is the first frame repeated.
                let head = ops::pad_rows(&ops::slice_rows(&z, 0, 1)?, 0, m.s - 1)?;
                self.partial = m.early(&m.conv1(&head)?)?.map(|v| v.to_tensor());
            }
            let partial = self.partial.take().map(Var::constant);
            let last = ops::slice_rows(&z, m.s - 1, m.s)?;
            let score = m.score(partial.as_ref(), &h1, &last)?;
            drop(partial);
            self.partial = m.early(&h1)?.map(|v| v.to_tensor());
            self.windows += 1;
            if self.windows == 1 && !closes {
                self.pending_first = Some(score);
                return Ok(None);
            }
            Ok(Some(score))
        })
    }

    /// Decision still owed when the stream ends exactly after its first
    /// full window.
    pub fn take_pending(&mut self) -> Option<f64> {
        self.pending_first.take()
    }

    pub fn state_bytes(&self) -> usize {
        self.partial.as_ref().map_or(0, |t| t.len() * std::mem::size_of::<T>())
    }
}
