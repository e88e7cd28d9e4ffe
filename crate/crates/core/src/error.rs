//! Crate-wide error type and exit-code mapping.
//!
//! Contract violations on in-memory math (shape mismatches, bad tensor
//! arguments) panic like `ndarray` does; this type covers everything that can
//! legitimately fail at run time: user configuration, input files, and
//! numeric breakdown inside the optimization loops.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad CLI usage or configuration (unknown key, unparsable value,
    /// missing input file). Maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data file (CSV, IDX, trigger spec, checkpoint).
    /// Maps to exit code 2.
    #[error("{path}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Data {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    /// Numeric failure inside an optimization loop (non-finite loss or
    /// gradient). Maps to exit code 1.
    #[error("numeric failure at {stage}: {msg}")]
    Numeric { stage: String, msg: String },

    /// Unexpected I/O failure while writing outputs. Maps to exit code 1.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn numeric(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for usage/config/input problems,
    /// 1 for internal or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data { .. } => 2,
            Error::Numeric { .. } | Error::Io { .. } => 1,
        }
    }
}
