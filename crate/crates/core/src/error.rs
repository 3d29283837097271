use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. Variants are grouped so callers
/// (the CLI in particular) can map them onto a small set of exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    /// A scene with no usable region of the requested kind, e.g. no
    /// background indices left for reconstruction.
    #[error("degenerate scene: {0}")]
    Degenerate(String),

    #[error("client transport failure ({client}): {message}")]
    Transport { client: String, message: String },

    #[error("could not parse {what} response: {message}")]
    Parse {
        what: String,
        message: String,
        raw: String,
    },

    #[error("numerical abort at iteration {iteration}: {message}")]
    NonFinite { iteration: usize, message: String },

    #[error("adapters already merged into this backbone")]
    AlreadyMerged,

    #[error("wire format: {0}")]
    Wire(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, used for exit codes and HTTP status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Client,
    Validation,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Transport { .. } | Error::Parse { .. } => ErrorClass::Client,
            Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Shape(_)
            | Error::Invalid(_)
            | Error::Degenerate(_)
            | Error::AlreadyMerged
            | Error::Wire(_)
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Json(_) => ErrorClass::Validation,
        }
    }

    /// Transport failures may succeed on retry; nothing else should be retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
