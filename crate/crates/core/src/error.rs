use std::path::PathBuf;

use pn_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("{path}: malformed record at byte {offset}: {detail}")]
    MalformedRecord { path: PathBuf, offset: u64, detail: String },

    #[error("dataset at {0} is empty")]
    DatasetEmpty(PathBuf),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at epoch {epoch} step {step}; last good checkpoint: {checkpoint:?}")]
    NonFiniteLoss { epoch: usize, step: usize, checkpoint: Option<PathBuf> },

    #[error("image decode failed for {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn config<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Config(detail.into()))
}
