use std::fmt;

use mtu_core::Error;

/// Failures grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::UnknownTask { .. }
            | Error::MissingTask(_)
            | Error::Divisibility { .. }
            | Error::Timestep { .. } => CliError::Config(msg),
            Error::Checkpoint(_) | Error::Incongruent(_) | Error::MissingParam(_) => CliError::Checkpoint(msg),
            _ => CliError::Data(msg),
        }
    }
}

/// Treats any failure while reading a checkpoint (including a missing file) as a checkpoint error.
pub fn as_checkpoint(e: Error) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Checkpoint(m),
        other => other,
    }
}
