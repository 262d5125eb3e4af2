use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("loss term `{term}` is not finite at iteration {iteration} (value {value})")]
    NonFinite { term: String, iteration: u64, value: f64 },

    #[error("checkpoint integrity error in `{blob}`: {message}")]
    Integrity { blob: String, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Shape(_) => 2,
            Error::Data(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Integrity { .. } | Error::Io { .. } => 5,
        }
    }

    /// Stable, greppable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config { .. } => "E_CONFIG",
            Error::Shape(_) => "E_SHAPE",
            Error::Data(_) => "E_DATA",
            Error::NonFinite { .. } => "E_NUMERIC",
            Error::Integrity { .. } => "E_INTEGRITY",
            Error::Io { .. } => "E_IO",
        }
    }
}
