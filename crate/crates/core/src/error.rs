use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Validation(String),

    /// Non-finite values; `step` is the optimizer step when raised during training.
    #[error("numeric error{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { step: Option<usize>, message: String },

    #[error("support violation at x={x}, y={y}: target mass on a zero-probability source label")]
    SupportViolation { x: usize, y: usize },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            step: None,
            message: msg.into(),
        }
    }

    /// Attach the training step to a numeric error; other variants pass through.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric { step: None, message } => Error::Numeric {
                step: Some(step),
                message,
            },
            other => other,
        }
    }
}
