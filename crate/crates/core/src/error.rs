use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The variants are grouped by what the caller can do about them: fix the
/// configuration, fix the calling code, or fix the data on disk.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A user-supplied parameter is out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Unknown modality name, malformed mask string and similar user input.
    #[error("input error: {0}")]
    Input(String),

    /// The requested synthesis task is degenerate (nothing to synthesize or no inputs).
    #[error("task error: {0}")]
    Task(String),

    /// A value went non-finite during training or sampling.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed, truncated, or corrupted file contents.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
