//! End-to-end scoring: encoder plus summary head, either chunk by chunk or
//! over the whole utterance.

use crate::autodiff::{no_grad, Real, Tensor, Var};
use crate::config::{ModelConfig, SummaryKind};
use crate::encoder::{
    encode_a2a, encode_stream, features_to_tensor, AttnMode, EmbeddingSequence, Encoder, StreamState,
};
use crate::error::{FtmError, Result};
use crate::features::FeatureSequence;
use crate::model::{Bound, Ctx};
use crate::summary::{summarize, ScoreTrajectory, SummaryModel, SummaryStream};

/// A decision: end frame and score.
pub type Emission = (usize, f64);

/// A streaming session: feeds chunks of at most S input frames through the
/// encoder and the summary head, emitting decisions as windows complete.
pub struct StreamingDetector<'a, T: Real> {
    cfg: &'a ModelConfig,
    params: &'a Bound<T>,
    model: &'a SummaryModel<T>,
    encoder: StreamState<T>,
    summary: SummaryStream<T>,
}

impl<'a, T: Real> StreamingDetector<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Bound<T>, model: &'a SummaryModel<T>) -> Result<Self> {
        let summary = SummaryStream::new(model);
        Ok(StreamingDetector {
            cfg,
            params,
            model,
            encoder: StreamState::new(cfg),
            summary,
        })
    }

    /// Consumes `chunk` (`[r, input_dim]`, `r ≤ S`; a short chunk ends the
    /// stream). Returns the finalized embeddings of the chunk and the
    /// decision emitted at its end, if any.
    pub fn push(&mut self, chunk: &Tensor<T>) -> Result<(Tensor<T>, Option<Emission>)> {
        let r = chunk.rows();
        let z = encode_stream(self.cfg, self.params, &mut self.encoder, chunk)?;
        let z = if r < z.rows() { z.slice_rows(0, r) } else { z };
        let emitted = self.summary.push(self.model, &z)?;
        Ok((z, emitted))
    }

    /// Payload bytes held across chunks by the encoder and the summary head.
    pub fn state_bytes(&self) -> usize {
        self.encoder.cached_bytes() + self.summary.state_bytes()
    }

    pub fn finish(self) -> Result<ScoreTrajectory> {
        self.summary.finish()
    }
}

/// Scores one utterance. Streaming kinds run chunk by chunk; the a2a kind
/// encodes the whole utterance with full attention.
pub fn detect<T: Real>(
    cfg: &ModelConfig,
    params: &Bound<T>,
    kind: SummaryKind,
    x: &FeatureSequence,
) -> Result<ScoreTrajectory> {
    if x.n_frames() == 0 {
        return Err(FtmError::Empty("utterance has no frames".into()));
    }
    if !kind.is_streaming() {
        let z = encode_a2a(cfg, params, x, AttnMode::Full)?;
        return summarize(kind, cfg, params, &z, false);
    }
    detect_tensor(cfg, params, kind, &features_to_tensor::<T>(x)?)
}

/// [`detect`] on an input already in tensor form (`[T, input_dim]`).
pub fn detect_tensor<T: Real>(
    cfg: &ModelConfig,
    params: &Bound<T>,
    kind: SummaryKind,
    x: &Tensor<T>,
) -> Result<ScoreTrajectory> {
    Detector::new(cfg, params, kind)?.run(x)
}

/// A loaded model ready to score utterances. Load-time work (folding the
/// streaming head's weights) happens once in [`Detector::new`].
pub struct Detector<'a, T: Real> {
    cfg: &'a ModelConfig,
    params: &'a Bound<T>,
    kind: SummaryKind,
    head: Option<SummaryModel<T>>,
}

impl<'a, T: Real> Detector<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Bound<T>, kind: SummaryKind) -> Result<Self> {
        let head = if kind.is_streaming() {
            Some(SummaryModel::new(kind, cfg, params)?)
        } else {
            None
        };
        Ok(Detector { cfg, params, kind, head })
    }

    /// A fresh streaming session (streaming kinds only).
    pub fn session(&self) -> Result<StreamingDetector<'_, T>> {
        match &self.head {
            Some(m) => StreamingDetector::new(self.cfg, self.params, m),
            None => Err(FtmError::Config(format!("{} has no streaming session", self.kind))),
        }
    }

    /// Scores `[T, input_dim]` input: chunks of S for streaming kinds, the
    /// whole utterance with full attention for a2a.
    pub fn run(&self, x: &Tensor<T>) -> Result<ScoreTrajectory> {
        let (cfg, params) = (self.cfg, self.params);
        let n = x.rows();
        if n == 0 {
            return Err(FtmError::Empty("utterance has no frames".into()));
        }
        if x.cols() != cfg.input_dim {
            return Err(FtmError::shape("detect", x.shape(), &[cfg.input_dim]));
        }
        if self.head.is_none() {
            let z = no_grad(|| {
                Encoder::new(cfg, params).forward(&Var::constant(x.clone()), AttnMode::Full, &mut Ctx::eval())
            })?
            .to_tensor();
            let z = EmbeddingSequence {
                finalized_upto: z.rows(),
                embeddings: z,
            };
            return summarize(self.kind, cfg, params, &z, false);
        }
        let mut det = self.session()?;
        let s = cfg.block_shift;
        for start in (0..n).step_by(s) {
            det.push(&x.slice_rows(start, (start + s).min(n)))?;
        }
        det.finish()
    }
}
