use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Dimension {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid bit-width set: {0}")]
    BitWidthSet(String),

    #[error("bit-width {bits} is not in the candidate set {set:?}")]
    UnknownBitWidth { bits: u8, set: Vec<u8> },

    #[error("non-positive quantization scale {scale} for {what}")]
    NonPositiveScale { what: String, scale: f32 },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("missing normalization statistics for key {0}")]
    MissingNormStats(String),

    #[error("infeasible constraint: average bit-width {omega} over {layers} layers is not achievable; achievable values: {achievable:?}")]
    Infeasible {
        omega: f64,
        layers: usize,
        achievable: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint format error at byte offset {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
