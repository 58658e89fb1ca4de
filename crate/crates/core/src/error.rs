//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised by every layer of the crate.
///
/// The variants map onto the CLI exit codes: configuration problems exit
/// with 2, numerical failures with 3 and I/O problems with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, hyperparameters or curriculum settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// An index or timestep outside its admissible range.
    #[error("range error: {0}")]
    Range(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Bad input data, e.g. a non-finite reward.
    #[error("data error: {0}")]
    Data(String),
    /// A computation produced NaN or infinity.
    #[error("numerical failure at node {node} ({op}): {detail}")]
    Numerical {
        node: usize,
        op: &'static str,
        detail: String,
    },
    /// Division by a vanishing schedule coefficient.
    #[error("singular solver step: {0}")]
    Singular(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but does not parse.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the `cdpo` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) | Error::Contract(_) | Error::Data(_) => 2,
            Error::Numerical { .. } | Error::Singular(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
