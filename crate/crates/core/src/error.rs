use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {what} requires {required}, cap is {cap}")]
    Capacity {
        what: &'static str,
        required: usize,
        cap: usize,
    },

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("under-determined fit: timestep {timestep} has no transitions")]
    UnderDetermined { timestep: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
