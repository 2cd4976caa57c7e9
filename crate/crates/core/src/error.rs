//! One error type for the whole crate. Every failure carries enough context
//! to act on: shapes for dimension errors, op names for numeric errors, line
//! numbers for config errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}{}", ctx.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite { op: &'static str, ctx: Option<String> },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("unknown instruction word `{word}`; valid words: {valid}")]
    Vocab { word: String, valid: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI. Vocabulary errors get their own code so
    /// scripted callers can distinguish bad instructions from bad configs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Vocab { .. } => 2,
            _ => 1,
        }
    }

    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    pub fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index { op, detail: detail.into() }
    }
}
