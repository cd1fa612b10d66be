use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape mismatch in {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("format error at byte offset {offset}: {reason}")]
    FormatAt { offset: u64, reason: String },

    #[error("non-finite value in record {index}")]
    NonFiniteRecord { index: usize },

    #[error("calibration is missing key {0}")]
    MissingKey(String),

    #[error("calibration key {key} has {found} values, expected {expected}")]
    WrongValueCount { key: String, expected: usize, found: usize },

    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("no indexed point lies within the search radius")]
    EmptyNeighborhood,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by malformed input files rather than bad arguments.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::FormatAt { .. }
                | Error::NonFiniteRecord { .. }
                | Error::MissingKey(_)
                | Error::WrongValueCount { .. }
                | Error::Malformed { .. }
                | Error::Format(_)
                | Error::Io(_)
        )
    }
}
