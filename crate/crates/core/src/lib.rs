//! Streaming false-trigger mitigation for voice assistants: a streaming
//! attention encoder, sequence summary heads, training with joint XE and CTC
//! objectives, evaluation metrics, a synthetic corpus and an inference
//! benchmark harness.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod summary;
pub mod synth;
pub mod train;

pub use autodiff::{measure_peak, no_grad, AllocationLedger, DType, Real, Tensor, Var};
pub use bench::{bench_inference, BenchRow};
pub use checkpoint::ParamStore;
pub use config::{ModelConfig, SummaryKind};
pub use detector::{detect, detect_tensor, Detector, StreamingDetector};
pub use encoder::{encode_a2a, encode_stream, AttnMode, EmbeddingSequence, StreamState};
pub use error::{FtmError, Result};
pub use features::FeatureSequence;
pub use losses::{ctc_loss, PhoneLabels};
pub use metrics::{det_curve, eer, far_at_frr, DetPoint, OperatingPoint, Scored};
pub use model::{init_params, Bound};
pub use summary::ScoreTrajectory;
pub use synth::{CorpusSpec, Invocation, Split, Utterance};
pub use train::{pretrain_phonetic, train_discriminative, Example, TrainConfig, TrainOutcome};
