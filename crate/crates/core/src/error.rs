use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum FtmError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Empty(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("measurement scope error: {0}")]
    Scope(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FtmError> = std::result::Result<T, E>;

impl FtmError {
    /// Prefixes the message with `what`, keeping the variant; errors without
    /// a message become data errors.
    pub fn context(self, what: &str) -> Self {
        match self {
            FtmError::Empty(m) => FtmError::Empty(format!("{what}: {m}")),
            FtmError::Config(m) => FtmError::Config(format!("{what}: {m}")),
            FtmError::Data(m) => FtmError::Data(format!("{what}: {m}")),
            FtmError::NonFinite(m) => FtmError::NonFinite(format!("{what}: {m}")),
            FtmError::Format(m) => FtmError::Format(format!("{what}: {m}")),
            FtmError::Scope(m) => FtmError::Scope(format!("{what}: {m}")),
            other => FtmError::Data(format!("{what}: {other}")),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FtmError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
