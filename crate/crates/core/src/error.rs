use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps to a short category string (see [`Error::category`])
/// which the command-line front end prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error at batch index {index}: {message}")]
    Numerical { index: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numerical { .. } => "numerical",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serialization",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
