//! CLI error type with stable process exit codes.

use std::fmt;

/// Exit codes: 0 ok, 1 IO/config, 2 missing dependency, 3 training failure.
#[derive(Debug)]
pub enum CliError {
    Io(std::io::Error),
    Config(String),
    MissingDependency(String),
    Training(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Config(_) => 1,
            CliError::MissingDependency(_) => 2,
            CliError::Training(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        CliError::MissingDependency(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(e) => write!(f, "IOError: {e}"),
            CliError::Config(m) => write!(f, "ConfigError: {m}"),
            CliError::MissingDependency(m) => write!(f, "MissingDependency: {m}"),
            CliError::Training(m) => write!(f, "TrainingError: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(format!("bad JSON: {e}"))
    }
}

impl From<reid_core::Error> for CliError {
    fn from(e: reid_core::Error) -> Self {
        match &e {
            reid_core::Error::Training(_) | reid_core::Error::Numerical(_) => {
                CliError::Training(format!("{e}"))
            }
            reid_core::Error::FreezeViolation(_) => CliError::Training(format!("{e}")),
            _ => CliError::Config(format!("{e}")),
        }
    }
}
