use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("empty bag: a bag needs at least one instance")]
    EmptyBag,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("verification failed:\n{0}")]
    CheckFailed(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("hook initialization error: expected {expected_rows}x{expected_cols} vectors, found {found_rows}x{found_cols}")]
    HookInit {
        expected_rows: usize,
        expected_cols: usize,
        found_rows: usize,
        found_cols: usize,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("shape overflow: {0}")]
    ShapeOverflow(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("corrupted payload: {0}")]
    Corrupt(String),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("stale tape: recorded against parameter version {tape}, parameters are at version {params}")]
    StaleTape { tape: u64, params: u64 },

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("no bags: {0}")]
    NoBags(String),

    #[error("non-finite loss on bag {bag_id:?} in epoch {epoch}")]
    NonFinite { bag_id: String, epoch: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for I/O and on-disk format problems (CLI exit code 2); everything
    /// else is a validation or check failure (exit code 1).
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::Truncated(_)
                | Error::ShapeOverflow(_)
                | Error::Version { .. }
                | Error::Corrupt(_)
                | Error::Manifest { .. }
        )
    }
}
