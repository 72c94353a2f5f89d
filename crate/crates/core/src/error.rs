use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the retrieval stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a shape or range precondition of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Input data is inconsistent (bad labels, empty categories, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file could not be decoded.
    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A text file (manifest, metadata) could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("uninitialized running statistics")]
    UninitializedStats,

    #[error("degenerate map: no value above {0:e}")]
    DegenerateMap(f64),

    #[error("no dominant region")]
    NoDominantRegion,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    ///
    /// `2` invalid configuration (a usage error, like a malformed flag),
    /// `3` data/format, `4` numeric contract violation, `5` I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Parse { .. } => 3,
            Error::Contract(_)
            | Error::UninitializedStats
            | Error::DegenerateMap(_)
            | Error::NoDominantRegion => 4,
            Error::Io { .. } => 5,
        }
    }
}
