use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("data length {len} does not match shape {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("division by zero at flat index {index}")]
    DivisionByZero { index: usize },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Graph(String),

    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },

    #[error("malformed tensor file {path}: {field}: {reason}")]
    Format {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
