use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    /// `line` is 1-based; 0 means the input had no content at all.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("split by subject needs at least two distinct source ids")]
    SingleSubject,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("frame {t} is out of range: {reason}")]
    OutOfRange { t: usize, reason: String },

    #[error("sequence {id} has {len} frames, need at least {needed}")]
    SequenceTooShort { id: String, len: usize, needed: usize },

    #[error("minimum overlap ratio must be in (0, 1], got {0}")]
    InvalidMor(f64),

    #[error("fps must be positive and finite, got {0}")]
    InvalidFps(f64),

    #[error("no ground-truth gestures to evaluate against")]
    NoGroundTruth,

    #[error("no matched detections")]
    NoMatches,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::InvariantViolation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
