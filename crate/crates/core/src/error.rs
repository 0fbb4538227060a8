use thiserror::Error;

/// Errors raised across model construction, training and file IO.
#[derive(Debug, Error)]
pub enum NffbError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numerical error: {0}")]
    Numerics(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NffbError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NffbError::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NffbError::Input(msg.into()))
}
