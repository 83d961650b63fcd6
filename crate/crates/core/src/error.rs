use std::path::PathBuf;

use thiserror::Error;

use crate::search::QueryResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} has near-zero norm after centering")]
    ZeroVector { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample of {rows} points is too small for {components} components")]
    SampleTooSmall { rows: usize, components: usize },

    #[error("rank deficient sample: singular value {index} is {value:e} (largest {largest:e})")]
    RankDeficient { index: usize, value: f64, largest: f64 },

    #[error("FastICA did not converge within {iterations} iterations (last change {last_change:e})")]
    ConvergenceFailure { iterations: usize, last_change: f64 },

    #[error("key has no nonzero component")]
    EmptyKey,

    #[error("weight block has no nonzero entry")]
    AllZero,

    #[error("chip is full ({capacity} patterns)")]
    ChipFull { capacity: usize },

    #[error("no neuron accumulated positive voltage during calibration")]
    NoActivity,

    #[error("capacity exceeded: {needed} patterns, room for {available}")]
    CapacityExceeded { needed: usize, available: usize },

    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("found {found} of {requested} matches before the horizon")]
    Starved { found: usize, requested: usize, partial: Box<QueryResult> },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
