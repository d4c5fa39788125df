use alloc::string::String;
use core::fmt;

/// Crate-wide error type. Variants mirror the distinct failure classes of
/// the public operations so callers can match on them.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A word is not in the closed vocabulary.
    UnknownToken(String),
    /// Tokenized text does not fit the fixed context length.
    ContextOverflow { words: usize, capacity: usize },
    /// Identity index outside the token bank.
    IdentityRange { id: usize, n_ids: usize },
    /// Camera index outside the side-information table.
    CameraRange { camera: usize, n_cameras: usize },
    /// Invalid configuration value.
    Config(String),
    /// Caller violated an operation precondition.
    Contract(String),
    /// Non-finite value produced during a forward pass.
    Numerical(String),
    /// Training diverged or failed mid-run.
    Training(String),
    /// A parameter that must stay frozen changed during a stage.
    FreezeViolation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::UnknownToken(w) => write!(f, "unknown token: {w:?}"),
            Error::ContextOverflow { words, capacity } => {
                write!(f, "text with {words} words exceeds context capacity {capacity}")
            }
            Error::IdentityRange { id, n_ids } => {
                write!(f, "identity index {id} out of range (N = {n_ids})")
            }
            Error::CameraRange { camera, n_cameras } => {
                write!(f, "camera id {camera} out of range (C = {n_cameras})")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Training(msg) => write!(f, "training error: {msg}"),
            Error::FreezeViolation(msg) => write!(f, "freeze violation: {msg}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
