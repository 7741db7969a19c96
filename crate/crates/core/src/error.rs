//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by library operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Dimension or shape mismatch between operands.
    Shape(String),
    /// Invalid configuration value or unknown name.
    Config(String),
    /// Invalid runtime input (e.g. token out of vocabulary range).
    Input(String),
    /// Operation not valid in the checkpoint's current state.
    State(String),
    /// A rotation matrix of the requested size cannot be built.
    Construction(String),
    /// Numerical failure (non-convergence, singular matrix, non-finite values).
    Numerical(String),
    /// Training diverged; carries the step index in the message.
    Training(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Construction(m) => write!(f, "construction error: {m}"),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
