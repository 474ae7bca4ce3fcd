//! Error type shared across the crate.

use std::path::PathBuf;

/// Convenient result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Location of a malformed element inside a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offset {
    /// Byte offset into a binary file.
    Byte(u64),
    /// 1-based line number in a text file (the header is line 1).
    Line(u64),
}

impl std::fmt::Display for Offset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Offset::Byte(b) => write!(f, "byte {b}"),
            Offset::Line(l) => write!(f, "line {l}"),
        }
    }
}

/// Errors produced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse.
    #[error("malformed data in {path} at {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: Offset,
        message: String,
    },

    /// Input data violates a documented invariant (bad range, NaN, …).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Array shapes do not line up for a network operation.
    #[error("shape mismatch in {op}: {message}")]
    Shape { op: &'static str, message: String },

    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training aborted (divergence, empty dataset, …).
    #[error("training failed: {0}")]
    Train(String),

    /// A checkpoint does not match the architecture it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Wrap an I/O error with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// A parse/validation failure at a byte offset of a binary file.
    pub fn at_byte(path: impl Into<PathBuf>, byte: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset: Offset::Byte(byte),
            message: message.into(),
        }
    }

    /// A parse/validation failure at a line of a text file (1-based).
    pub fn at_line(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset: Offset::Line(line),
            message: message.into(),
        }
    }
}
