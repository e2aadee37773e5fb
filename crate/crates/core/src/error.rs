use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("format error in {source_name} at byte offset {offset}: {message}")]
    Format {
        source_name: String,
        offset: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub(crate) fn arg(msg: impl fmt::Display) -> Self {
        Error::Argument(msg.to_string())
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(source_name: impl fmt::Display, offset: u64, msg: impl fmt::Display) -> Self {
        Error::Format {
            source_name: source_name.to_string(),
            offset,
            message: msg.to_string(),
        }
    }

    /// True for errors that stem from bad input or configuration rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Argument(_) | Error::Config(_) | Error::Dimension(_))
    }
}
