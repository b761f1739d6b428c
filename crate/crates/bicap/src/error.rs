use std::fmt;

/// Errors produced by the training and inference toolkit.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes or layer geometry do not line up.
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Dataset file missing, truncated, or malformed.
    Data(String),
    /// Checkpoint file malformed, truncated, or unsupported.
    Format(String),
    /// A NaN or infinity surfaced where a finite value is required.
    NonFinite(String),
    Io(std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::NonFinite(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Data(msg) => write!(f, "dataset error: {msg}"),
            Error::Format(msg) => write!(f, "checkpoint format error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
