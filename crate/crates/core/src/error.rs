use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point was passed outside the domain of the kernel.
    #[error("point {value} is outside the kernel domain [0, 1]")]
    Domain { value: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Malformed problem or argument (shape mismatch, out-of-range parameter, non-PSD Gram).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("unsupported formulation: {0}")]
    UnsupportedFormulation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("search space too large: {0}")]
    Size(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Parse failure with file and location context.
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by the caller's data rather than by the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Input(_) | Error::Domain { .. }
        )
    }
}
