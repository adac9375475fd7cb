use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),

    // the io error is part of the message rather than a `source`, so error
    // chains do not print it twice
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}: unsupported image format ({detail}); expected 8-bit grayscale or RGB")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("corrupt {kind} file: {reason}")]
    Corrupt { kind: &'static str, reason: String },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("{0}")]
    Mismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn corrupt(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            kind,
            reason: reason.into(),
        }
    }
}
