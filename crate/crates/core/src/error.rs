use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the curation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed store: {0}")]
    Format(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate clip id {0:?}")]
    DuplicateClip(String),
    #[error("unknown clip id {0:?}")]
    UnknownClip(String),
    #[error("unknown layer {modality} {layer}")]
    UnknownLayer { modality: String, layer: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not enough distinct vectors: need {needed}, found {found}")]
    TooFewDistinct { needed: usize, found: usize },
    #[error("cluster id {id} out of range for space with k={k}")]
    InvalidClusterId { id: u32, k: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("zero-norm embedding at row {0}")]
    ZeroNorm(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
