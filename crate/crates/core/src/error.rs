use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the toolkit.
///
/// File-format failures are split into [`Error::BadMagic`], [`Error::Version`]
/// and [`Error::Checksum`] so callers can tell a foreign file from a damaged one.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("model is not convertible: {}", .0.join("; "))]
    Unconvertible(Vec<String>),

    #[error("degenerate activation scale in layer {layer} ({name}): no positive calibration activations")]
    DegenerateScale { layer: usize, name: String },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version or tag: {0}")]
    Version(String),

    #[error("checksum mismatch or truncated file")]
    Checksum,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
