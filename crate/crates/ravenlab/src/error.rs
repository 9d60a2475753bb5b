use std::io;

use thiserror::Error;

/// Error type shared across the workspace.
///
/// The CLI maps variants onto exit codes: config errors exit 2, numeric
/// failures exit 3, I/O and format errors exit 4.
#[derive(Debug, Error)]
pub enum RavenError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl RavenError {
    pub fn config(msg: impl Into<String>) -> Self {
        RavenError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        RavenError::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        RavenError::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        RavenError::Format(msg.into())
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RavenError::Config(_) | RavenError::Vocab(_) => 2,
            RavenError::Shape(_) | RavenError::Numeric(_) => 3,
            RavenError::Format(_) | RavenError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, RavenError>;
