use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match {len} values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tracked leaf")]
    Detached,
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

/// Errors raised while reading or writing the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated {section}: need {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        section: String,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, reason: impl Into<String>) -> Self {
        FormatError::Malformed {
            what: what.into(),
            reason: reason.into(),
        }
    }
}

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite loss at iteration {iteration} (image {image}): {detail}")]
    NonFiniteLoss {
        iteration: usize,
        image: String,
        detail: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
