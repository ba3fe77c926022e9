use thiserror::Error;

use crate::factor::BlockKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("unknown block {0}")]
    UnknownBlock(BlockKey),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A solve reached a column whose diagonal is zero or was never informed.
    #[error("singular factor at column {column}{}", block.map(|b| format!(" (block {b})")).unwrap_or_default())]
    Singular { column: usize, block: Option<BlockKey> },

    #[error("window discipline violated: block {block} is outside the active window")]
    OutsideWindow { block: BlockKey },

    #[error("no loop-closure rows touching previously mapped states")]
    NoLoopClosure,

    #[error("feedback does not answer the pending backend snapshot ({0})")]
    SnapshotMismatch(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("invalid parameters: {0}")]
    Params(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// An estimate left the dense batch solution by more than the tolerance.
    #[error("oracle check failed at step {step}: estimate differs from the batch solution by {deviation:e}")]
    OracleCheck { step: u32, deviation: f64 },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
