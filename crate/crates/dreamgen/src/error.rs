//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying IO failure, with the path or section that failed.
    #[error("io error ({context}): {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data (checkpoint, PPM, manifest, JSON config).
    #[error("parse error in {what} at byte {offset}: {detail}")]
    Parse {
        what: String,
        offset: usize,
        detail: String,
    },

    /// NaN/Inf showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset content violates a precondition (empty class, bad label).
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code contract: 2 config/usage, 3 IO, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Config(_) | Error::Data(_) => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
