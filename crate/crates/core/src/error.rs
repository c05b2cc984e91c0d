use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A file failed to parse. `location` is a line number for text formats
    /// and a byte offset for binary payloads.
    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },

    /// Input parsed but holds unusable values (non-finite coordinates,
    /// mismatched channel lengths, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A cluster or neighbourhood is geometrically degenerate.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// A synthetic scene description is inconsistent.
    #[error("scene spec error: {0}")]
    Spec(String),

    /// A configuration file or flag is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed; wraps the cause.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Position of a parse failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Byte(u64),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Byte(b) => write!(f, "byte {b}"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Innermost error below any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
