use std::io;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A file could not be decoded.
    #[error("parse error at byte {offset} in field `{field}`: {message}")]
    Parse {
        offset: u64,
        field: String,
        message: String,
    },
    /// A stored hash did not match its recomputation.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A checkpoint carried a parameter the target model does not know.
    #[error("schema error: {0}")]
    Schema(String),
    /// A checkpoint for one stage was loaded into another.
    #[error("stage error: expected `{expected}` checkpoint, found `{found}`")]
    Stage { expected: String, found: String },
    /// Training was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),
    /// A function under evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// Missing inputs or unwritable outputs.
    #[error("environment error: {0}")]
    Environment(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
