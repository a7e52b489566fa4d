use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error(
        "non-finite value at token (frame {frame}, row {row}, col {col}), component {component}"
    )]
    NonFinite {
        frame: usize,
        row: usize,
        col: usize,
        component: usize,
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("cluster count K = {k} must be in 1..={m}")]
    InvalidClusterCount { k: usize, m: usize },

    #[error("neighbor count knn = {knn} must be in 1..{m}")]
    InvalidNeighborCount { knn: usize, m: usize },

    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("vertex {0} has zero degree")]
    ZeroDegree(usize),

    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("vector {index} is not unit norm (norm = {norm})")]
    NotUnitNorm { index: usize, norm: f64 },

    #[error("{0}")]
    Invalid(String),

    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Process exit status for the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
