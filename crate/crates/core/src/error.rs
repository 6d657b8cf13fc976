use std::path::PathBuf;

use thiserror::Error;

use crate::ndiff::NdiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("training aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by the caller's input rather than internal
    /// failures; the command line maps these to exit code 2.
    pub fn is_bad_input(&self) -> bool {
        matches!(
            self,
            Error::InvalidScene(_)
                | Error::PixelOutOfBounds { .. }
                | Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Format { .. }
                | Error::Io { .. }
        )
    }
}
