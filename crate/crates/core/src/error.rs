use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible level schedule at op {op_index}: {reason}")]
    Infeasible { op_index: usize, reason: String },

    #[error("no bootstrap placement exists: {0}")]
    NoPlacement(String),

    #[error("cannot fold scaling into the {side} operation: {reason}")]
    FoldTarget { side: &'static str, reason: String },

    #[error("fit error {achieved:.6} above threshold {threshold:.6}")]
    FitFailure { achieved: f64, threshold: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidInput(format!("json: {e}"))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
