use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("backward already called on this recording")]
    BackwardConsumed,

    #[error("zero vector in {0}")]
    ZeroVector(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("inputs do not correspond: {0}")]
    Mismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("sample `{id}`: expected {expected} keypoints per frame, found {found}")]
    KeypointCount { id: String, expected: usize, found: usize },

    #[error("sample `{id}`: {msg}")]
    Sample { id: String, msg: String },

    #[error("sentence `{sentence}` needs {frames} frames but the length limit is {limit}")]
    SentenceTooLong { sentence: String, frames: usize, limit: usize },

    #[error("degenerate pose sequence: all keypoints coincide")]
    DegeneratePose,

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
