use std::io;

use thiserror::Error;

/// Errors raised anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for errors caused by invalid user input or configuration
    /// rather than numeric breakdown or IO.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Parameter(_)
                | Error::Input(_)
                | Error::Domain(_)
                | Error::Config(_)
        )
    }
}
