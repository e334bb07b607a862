use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the transmission chain, training loop or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric domain error in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("missing checkpoint for system `{system}` at {}", path.display())]
    MissingCheckpoint { system: String, path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NumericDomain { .. } => "numeric_domain",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Usage(_) => "usage",
            Error::Degenerate(_) => "degenerate",
            Error::Input(_) => "input",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Parse { .. } => "parse",
            Error::MissingCheckpoint { .. } => "missing_checkpoint",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
