use std::io;
use std::path::PathBuf;

/// Errors produced across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("band partition leaves the {0} region empty")]
    PartitionEmpty(&'static str),

    #[error("index {index} out of range for {len} columns")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid block size {block} for a {height}x{width} image")]
    InvalidBlockSize { block: usize, height: usize, width: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("need at least {needed} rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },

    #[error("residual subspace collapsed after {selected} of {requested} selections")]
    RankDeficient { selected: usize, requested: usize },

    #[error("image {height}x{width} is smaller than the {patch}x{patch} input neighborhood")]
    ImageTooSmall { height: usize, width: usize, patch: usize },

    #[error("forward cache does not match gradient: {0}")]
    CacheMismatch(String),

    #[error("invalid sliding window: {0}")]
    InvalidWindow(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
