use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("singular covariance for gaussian {index}")]
    SingularCovariance { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid skinning weights: {0}")]
    Weights(String),

    #[error("invalid template: {0}")]
    Template(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: byte offset {offset}: {msg}")]
    FormatAt { path: PathBuf, offset: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pruning removed every gaussian")]
    EmptyCloud,

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end: 2 for bad data,
    /// 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::SingularCovariance { .. } | Error::EmptyCloud | Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
