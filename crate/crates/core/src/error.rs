use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, ranges, sizes).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wrong magic, version or record kind.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter than its declared lengths, or trailing garbage.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// Structurally sound file whose contents break a record invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Non-finite values or runaway losses during optimization.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than bad files or the OS.
    pub fn is_contract(&self) -> bool {
        matches!(self, Error::Contract { .. } | Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
