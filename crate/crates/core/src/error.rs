use std::path::PathBuf;

use thiserror::Error;
use tms_autograd::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("wavelet transform needs even spatial dims, got {h}x{w}")]
    OddDims { h: usize, w: usize },
    #[error("subband shapes disagree: {0:?} vs {1:?}")]
    SubbandMismatch(Vec<usize>, Vec<usize>),
    #[error("volume geometry: {0}")]
    Geometry(String),
    #[error("dimension {dim} is not divisible by {factor}")]
    Indivisible { dim: usize, factor: usize },
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
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cosine similarity is undefined for an all-zero vector")]
    ZeroVector,
    #[error("metric inputs disagree: {0}")]
    MetricInput(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }
}
