use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("no cache candidates to filter")]
    NoCandidates,

    #[error("record {0} not found in store")]
    MissingRecord(u64),

    #[error("non-finite gradient in tensor `{0}`, optimizer step aborted")]
    NonFinite(String),

    #[error("corrupt experience: {0}")]
    CorruptExperience(String),

    #[error("agents hold different policy snapshots: expected version {expected}, found {found}")]
    VersionMismatch { expected: u64, found: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Configuration problems are reported before any work starts and map to a
    /// distinct CLI exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Dimension { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
