//! Crate-wide error taxonomy.
//!
//! Five failure classes cover every fallible operation: invalid
//! configuration, invalid runtime input, numerical degeneracy, malformed
//! binary files, and API misuse. I/O errors pass through untouched.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A structural parameter is invalid (e.g. even kernel size,
    /// mismatched channel counts, zero-band filter bank).
    #[error("configuration: {0}")]
    Config(String),

    /// Runtime data violates a precondition (wrong length, wrong sample
    /// rate, empty batch).
    #[error("input: {0}")]
    Input(String),

    /// The computation is mathematically undefined for this input
    /// (e.g. spectral convergence against an all-zero reference).
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// A binary file does not match its documented layout. `offset` is
    /// the byte position at which parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    /// An API was called in a way its contract forbids (e.g. backward
    /// from a non-scalar node).
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
    pub fn format(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format { msg: msg.into(), offset }
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
