//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("reduction over an empty axis in {op}")]
    EmptyAxis { op: &'static str },

    #[error("convolution kernel width {0} is even; only odd widths keep the output length")]
    EvenKernel(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("non-finite value encountered: {0}")]
    NonFiniteValue(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("query has no tokens")]
    EmptyQuery,

    #[error("number of phrases must be at least 1, got {0}")]
    NInvalid(usize),

    #[error("temporal guide has no positive entry")]
    EmptyGuide,

    #[error("length mismatch: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),

    #[error("nothing to evaluate")]
    Empty,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {path}{}: {msg} (byte offset {offset})", video_id.as_ref().map(|v| format!(" [video {v}]")).unwrap_or_default())]
    Format {
        path: PathBuf,
        video_id: Option<String>,
        offset: u64,
        msg: String,
    },

    #[error("sample `{id}` violates an invariant: {msg}")]
    InvariantViolation { id: String, msg: String },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::ConfigInvalid(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::Format { .. }
            | Error::InvariantViolation { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::LengthMismatch(..)
            | Error::Empty
            | Error::EmptyQuery
            | Error::EmptyGuide => ErrorClass::Data,
            _ => ErrorClass::Numeric,
        }
    }
}
