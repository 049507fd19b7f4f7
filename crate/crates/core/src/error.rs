use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("access violation: {0}")]
    Access(String),

    #[error("state error: {0}")]
    State(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures while decoding IDX files. Every variant names the byte offset
/// where decoding stopped.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic at offset {offset}: found {found:#010x}, expected {expected:#010x}")]
    BadMagic { offset: usize, found: u32, expected: u32 },

    #[error("truncated IDX data at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("trailing bytes after IDX payload at offset {offset}: {extra} extra bytes")]
    Trailing { offset: usize, extra: usize },

    #[error("IDX count mismatch at offset {offset}: {images} images vs {labels} labels")]
    CountMismatch {
        offset: usize,
        images: usize,
        labels: usize,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

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
}
