use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how callers should react: `Config` means the
/// inputs were malformed before any work started, `Contract` means a caller
/// broke an API precondition mid-run, and the rest are domain-specific
/// failures surfaced by individual subsystems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence length exceeded: {0}")]
    SequenceLength(String),

    #[error("feature layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("model state error: {0}")]
    State(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("trace format error: {0}")]
    TraceFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for bad inputs, 3 for broken
    /// runtime contracts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Serde(_) | Error::TraceFormat(_) => 2,
            _ => 3,
        }
    }
}
