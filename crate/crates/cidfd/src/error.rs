//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset construction, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector that must be normalizable was (numerically) zero.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An index referred outside the owning container.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A scalar parameter violated its domain (temperatures, momenta, counts).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Training produced a non-finite loss; a diagnostic snapshot may have been written.
    #[error("non-finite loss at stage {stage}, epoch {epoch}, batch {batch}{}",
            snapshot.as_ref().map(|p| format!(" (snapshot: {})", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        stage: u8,
        epoch: usize,
        batch: usize,
        snapshot: Option<PathBuf>,
    },

    /// Stage-2 training was requested before stage 1 completed.
    #[error("stage order violation: {0}")]
    StageOrder(String),

    /// A file had the wrong magic number or a malformed layout.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decoding failure.
    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    /// Configuration file rejected by the schema.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
