use std::io;

/// Errors produced across the pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid value for `{key}`: {reason}")]
    Parse { key: String, reason: String },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    PayloadTooLarge(usize),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("startup failed: {0}")]
    Startup(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
