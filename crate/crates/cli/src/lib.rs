//! The `ftm` command surface: corpus generation, training, evaluation,
//! benchmarking, trajectory export and the accuracy matrix.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use commands::{run, Cli, Command};
pub use config::{resolve, RunConfig};
pub use manifest::RunManifest;

use ftm_core::FtmError;

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &FtmError) -> i32 {
    match e {
        FtmError::Config(_) | FtmError::Shape { .. } => 2,
        FtmError::NonFinite(_) => 4,
        FtmError::Data(_)
        | FtmError::Empty(_)
        | FtmError::Format(_)
        | FtmError::Io(_)
        | FtmError::Csv(_)
        | FtmError::Json(_) => 3,
        FtmError::Scope(_) => 1,
    }
}
