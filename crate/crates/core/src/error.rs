//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's contract (shape mismatch, bad argument,
    /// malformed input data). Maps to exit code 1 in the CLI.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Filesystem-level failure. Maps to exit code 2 in the CLI.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    /// Image decode/encode failure. Maps to exit code 2 in the CLI.
    #[error("image i/o failure: {0}")]
    Image(#[from] image::ImageError),

    /// A scene manifest failed validation; the message names the offending field.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Tensor or checkpoint container could not be parsed.
    #[error("serialization error: {0}")]
    Serial(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

impl Error {
    /// I/O failure with path context folded into the message.
    pub fn io_msg(msg: impl Into<String>) -> Error {
        Error::Io(std::io::Error::other(msg.into()))
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Image(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Returns a `Contract` error unless `cond` holds.
macro_rules! ensure_contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use ensure_contract;
