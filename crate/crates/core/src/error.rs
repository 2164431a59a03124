use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. The variants line up with the
/// CLI exit-code scheme: configuration problems, data problems and
/// numerical problems are kept apart.
#[derive(Debug, Error)]
pub enum Error {
    /// An operator parameter is out of its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Inputs disagree in shape or size.
    #[error("input error: {0}")]
    Input(String),

    /// A binary or text file does not follow its format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or gradient stopped being finite.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: impl TryInto<u64>, message: impl Into<String>) -> Self {
        Error::Format {
            offset: offset.try_into().unwrap_or(u64::MAX),
            message: message.into(),
        }
    }

    /// Broad class of the failure, used by front ends to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Json(_) => ErrorKind::Config,
            Error::Input(_) | Error::Format { .. } | Error::Io { .. } => ErrorKind::Data,
            Error::Numerical(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}
