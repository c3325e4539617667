//! Sequence summary layers: turn encoder embeddings into block-wise decision
//! scores and a final mitigation score.
//!
//! Scores are the posterior of the device-directed class. Streaming kinds
//! emit a decision at every shift boundary (s-TCN from 2S on) and one more
//! at the end of the stream when it does not fall on a boundary. A decision
//! emitted at frame `τ` depends only on frames before `τ` and never changes.

pub mod lstm;
pub mod save;
pub mod stcn;

use std::io::Write;

use crate::autodiff::{no_grad, Real, Tensor, Var};
use crate::config::{ModelConfig, SummaryKind};
use crate::encoder::EmbeddingSequence;
use crate::error::{FtmError, Result};
use crate::model::{Bound, Ctx};

pub use lstm::{LstmModel, LstmState};
pub use save::{SaveModel, SaveState};
pub use stcn::{stcn_unit, StcnModel, StcnState};

/// Decisions emitted over time plus the final mitigation score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrajectory {
    pub times_frames: Vec<usize>,
    pub scores: Vec<f64>,
    pub final_score: f64,
}

impl ScoreTrajectory {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Posterior of class 1 from a pair of logits.
pub(crate) fn posterior<T: Real>(logits: &[T]) -> f64 {
    let d = logits[0].as_f64() - logits[1].as_f64();
    1.0 / (1.0 + d.exp())
}

/// Frames at which `kind` emits decisions for a `t`-frame input.
pub fn emission_times(kind: SummaryKind, t: usize, s: usize) -> Vec<usize> {
    match kind {
        SummaryKind::Stcn => stcn::stcn_emission_times(t, s),
        SummaryKind::Slstm | SummaryKind::Save => (1..=t.div_ceil(s)).map(|j| (j * s).min(t)).collect(),
        SummaryKind::A2aLstm => Vec::new(),
    }
}

/// Training logits of the summary head: one row per emission for s-TCN,
/// one row per frame otherwise.
pub fn head_logits<T: Real>(
    kind: SummaryKind,
    cfg: &ModelConfig,
    p: &Bound<T>,
    z: &Var<T>,
    ctx: &mut Ctx,
) -> Result<Var<T>> {
    match kind {
        SummaryKind::Stcn => stcn::stcn_logits(cfg, p, z, ctx),
        SummaryKind::Slstm | SummaryKind::A2aLstm => lstm::lstm_logits(cfg, p, z, ctx),
        SummaryKind::Save => save::save_logits(cfg, p, z, ctx),
    }
}

/// Turns the head's logits over a `t`-frame input into the trajectory.
fn trajectory_from_logits<T: Real>(
    kind: SummaryKind,
    cfg: &ModelConfig,
    logits: &Tensor<T>,
    t: usize,
) -> ScoreTrajectory {
    let post: Vec<f64> = (0..logits.rows()).map(|r| posterior(logits.row(r))).collect();
    let times = emission_times(kind, t, cfg.block_shift);
    match kind {
        SummaryKind::Stcn => ScoreTrajectory {
            final_score: post.iter().sum::<f64>() / post.len() as f64,
            times_frames: times,
            scores: post,
        },
        SummaryKind::Slstm => {
            let scores: Vec<f64> = times
                .iter()
                .map(|&tau| lstm::recent_mean(&post, tau, cfg.lstm_avg_frames))
                .collect();
            ScoreTrajectory {
                final_score: *scores.last().expect("at least one emission"),
                times_frames: times,
                scores,
            }
        }
        SummaryKind::Save => {
            let mut scores = Vec::with_capacity(times.len());
            let mut sum = 0.0;
            let mut upto = 0;
            for &tau in &times {
                sum += post[upto..tau].iter().sum::<f64>();
                upto = tau;
                scores.push(sum / tau as f64);
            }
            ScoreTrajectory {
                final_score: *scores.last().expect("at least one emission"),
                times_frames: times,
                scores,
            }
        }
        SummaryKind::A2aLstm => ScoreTrajectory {
            times_frames: Vec::new(),
            scores: Vec::new(),
            final_score: lstm::recent_mean(&post, t, cfg.lstm_avg_frames),
        },
    }
}

/// Per-frame posteriors of the LSTM and averaging heads.
pub fn frame_posteriors<T: Real>(
    kind: SummaryKind,
    cfg: &ModelConfig,
    p: &Bound<T>,
    z: &EmbeddingSequence<T>,
) -> Result<Vec<f64>> {
    if kind == SummaryKind::Stcn {
        return Err(FtmError::Config("s-TCN has no per-frame posteriors".into()));
    }
    no_grad(|| {
        let logits = head_logits(kind, cfg, p, &Var::constant(z.embeddings.clone()), &mut Ctx::eval())?;
        let lv = logits.value();
        Ok((0..lv.rows()).map(|r| posterior(lv.row(r))).collect())
    })
}

/// Scores encoder output `z` with the `kind` head. `streaming` selects the
/// incremental implementation (streaming kinds only); otherwise the whole
/// sequence goes through the head at once. Both yield the same trajectory.
pub fn summarize<T: Real>(
    kind: SummaryKind,
    cfg: &ModelConfig,
    p: &Bound<T>,
    z: &EmbeddingSequence<T>,
    streaming: bool,
) -> Result<ScoreTrajectory> {
    let t = z.len();
    if t == 0 {
        return Err(FtmError::Empty("no embeddings to summarize".into()));
    }
    if streaming {
        let model = SummaryModel::new(kind, cfg, p)?;
        let mut stream = SummaryStream::new(&model);
        let s = cfg.block_shift;
        for start in (0..t).step_by(s) {
            stream.push(&model, &z.embeddings.slice_rows(start, (start + s).min(t)))?;
        }
        return stream.finish();
    }
    no_grad(|| {
        let logits = head_logits(kind, cfg, p, &Var::constant(z.embeddings.clone()), &mut Ctx::eval())?;
        let lv = logits.value();
        Ok(trajectory_from_logits(kind, cfg, &lv, t))
    })
}

/// Inference weights of a streaming head.
pub enum Head<T: Real> {
    Stcn(StcnModel<T>),
    Slstm(LstmModel<T>),
    Save(SaveModel<T>),
}

pub struct SummaryModel<T: Real> {
    pub block_shift: usize,
    pub head: Head<T>,
}

impl<T: Real> SummaryModel<T> {
    pub fn new(kind: SummaryKind, cfg: &ModelConfig, p: &Bound<T>) -> Result<Self> {
        let head = match kind {
            SummaryKind::Stcn => Head::Stcn(StcnModel::new(cfg, p)?),
            SummaryKind::Slstm => Head::Slstm(LstmModel::new(cfg, p)?),
            SummaryKind::Save => Head::Save(SaveModel::new(p)?),
            SummaryKind::A2aLstm => {
                return Err(FtmError::Config("a2a summary cannot run in streaming mode".into()))
            }
        };
        Ok(SummaryModel {
            block_shift: cfg.block_shift,
            head,
        })
    }

    pub fn kind(&self) -> SummaryKind {
        match self.head {
            Head::Stcn(_) => SummaryKind::Stcn,
            Head::Slstm(_) => SummaryKind::Slstm,
            Head::Save(_) => SummaryKind::Save,
        }
    }
}

enum SummaryState<T: Real> {
    Stcn(StcnState<T>),
    Slstm(LstmState<T>),
    Save(SaveState),
}

/// Per-session summary state plus the decisions emitted so far.
pub struct SummaryStream<T: Real> {
    state: SummaryState<T>,
    times: Vec<usize>,
    scores: Vec<f64>,
    frames: usize,
    closed: bool,
}

impl<T: Real> SummaryStream<T> {
    pub fn new(model: &SummaryModel<T>) -> Self {
        let state = match &model.head {
            Head::Stcn(_) => SummaryState::Stcn(StcnState::default()),
            Head::Slstm(m) => SummaryState::Slstm(LstmState::new(m)),
            Head::Save(_) => SummaryState::Save(SaveState::default()),
        };
        SummaryStream {
            state,
            times: Vec::new(),
            scores: Vec::new(),
            frames: 0,
            closed: false,
        }
    }

    /// Consumes the next window of encoder frames (`[r, d]`, `r ≤ S`; a
    /// short window ends the stream) and returns the decision emitted at its
    /// end, if any.
    pub fn push(&mut self, model: &SummaryModel<T>, z: &Tensor<T>) -> Result<Option<(usize, f64)>> {
        let s = model.block_shift;
        let r = z.rows();
        if self.closed {
            return Err(FtmError::Data("stream already ended with a short window".into()));
        }
        if r == 0 || r > s {
            return Err(FtmError::shape("summary push", z.shape(), &[s, 0]));
        }
        let closes = r < s;
        let score = match (&mut self.state, &model.head) {
            (SummaryState::Stcn(st), Head::Stcn(m)) => st.push(m, z, closes)?,
            (SummaryState::Slstm(st), Head::Slstm(m)) => Some(st.push(m, z)?),
            (SummaryState::Save(st), Head::Save(m)) => Some(st.push(m, z)?),
            _ => return Err(FtmError::Config("summary state does not match the model".into())),
        };
        self.frames += r;
        self.closed = closes;
        Ok(score.map(|v| {
            self.times.push(self.frames);
            self.scores.push(v);
            (self.frames, v)
        }))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Payload bytes of the recurrent state.
    pub fn state_bytes(&self) -> usize {
        match &self.state {
            SummaryState::Stcn(s) => s.state_bytes(),
            SummaryState::Slstm(s) => s.state_bytes(),
            SummaryState::Save(s) => s.state_bytes(),
        }
    }

    /// Ends the stream and returns every decision with the final score.
    pub fn finish(mut self) -> Result<ScoreTrajectory> {
        if self.frames == 0 {
            return Err(FtmError::Empty("stream ended before any frame".into()));
        }
        if let SummaryState::Stcn(st) = &mut self.state {
            if self.scores.is_empty() {
                let v = st
                    .take_pending()
                    .ok_or_else(|| FtmError::Data("s-TCN stream has no decision".into()))?;
                self.times.push(self.frames);
                self.scores.push(v);
            }
        }
        let final_score = match self.state {
            SummaryState::Stcn(_) => self.scores.iter().sum::<f64>() / self.scores.len() as f64,
            _ => *self.scores.last().expect("non-empty stream emitted"),
        };
        Ok(ScoreTrajectory {
            times_frames: self.times,
            scores: self.scores,
            final_score,
        })
    }
}

/// Earliest emission time whose score falls below `threshold`, i.e. the
/// first moment the utterance would be mitigated.
pub fn early_decision(traj: &ScoreTrajectory, threshold: f64) -> Result<Option<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(FtmError::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    if traj.is_empty() {
        return Err(FtmError::Empty("empty score trajectory".into()));
    }
    Ok(traj
        .times_frames
        .iter()
        .zip(&traj.scores)
        .find(|(_, &s)| s < threshold)
        .map(|(&t, _)| t))
}

/// Writes trajectories as CSV rows
/// `utterance_id,frame_time,seconds,score,final_score`.
pub fn write_trajectories_csv<'a, W: Write>(
    w: W,
    rows: impl IntoIterator<Item = (&'a str, &'a ScoreTrajectory)>,
    frame_period_ms: f64,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["utterance_id", "frame_time", "seconds", "score", "final_score"])?;
    for (id, traj) in rows {
        for (&t, &s) in traj.times_frames.iter().zip(&traj.scores) {
            out.write_record([
                id.to_string(),
                t.to_string(),
                format!("{:.3}", t as f64 * frame_period_ms / 1000.0),
                format!("{s:.6}"),
                format!("{:.6}", traj.final_score),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
