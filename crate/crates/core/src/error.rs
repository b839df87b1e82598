use std::path::PathBuf;

use thiserror::Error;

use crate::scalar::DType;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint element type {found} does not match {expected}")]
    DTypeMismatch { found: DType, expected: DType },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint is missing key `{0}`")]
    MissingKey(String),

    #[error("checkpoint contains unknown key `{0}`")]
    UnknownKey(String),

    #[error("shape mismatch for `{key}`: checkpoint {found:?}, model {expected:?}")]
    KeyShape {
        key: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: ImageFault },

    #[error("{context}: {err}")]
    Io { context: String, err: std::io::Error },
}

/// Distinct ways a portable-pixmap file can be rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageFault {
    #[error("unsupported format (magic {0:?}, only binary P6 is read)")]
    UnsupportedFormat(String),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("maxval {0} is not 255")]
    MaxVal(u32),
    #[error("truncated pixel data ({found} of {expected} bytes)")]
    Truncated { found: usize, expected: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            err: source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use shape_err;
