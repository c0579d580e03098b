use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes violate an operation's shape rule.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file contents.
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: usize,
        detail: String,
    },

    /// A checkpoint does not match the architecture it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    /// NaN or infinity where a finite value is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
