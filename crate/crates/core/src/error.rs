//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("empty point cloud")]
    EmptyPointCloud,

    #[error("kernel and camera centers coincide; no view direction")]
    CoincidentPoints,

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("{0}")]
    InvalidData(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("non-finite {term} at iteration {iteration}")]
    NumericAbort { iteration: u64, term: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error::InvalidData(message.into())
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
