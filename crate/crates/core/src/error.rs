use thiserror::Error;

/// Errors produced by the geometry, loss, sampling and evaluation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty mask has no bounding box")]
    EmptyMask,

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("mask exceeds box")]
    MaskExceedsBox,

    #[error("weights undefined for empty target")]
    EmptyTarget,

    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
