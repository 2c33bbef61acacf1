use thiserror::Error;

use crate::config::ConfigError;
use crate::simnet::codec::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numeric or structural parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller broke an operation's precondition (wrong modalities, mismatched partitions, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Out-of-order or missing round messages.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("invalid configuration:\n{}", format_config_errors(.0))]
    Config(Vec<ConfigError>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_config_errors(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(|e| format!("  {e}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
