use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// Variants are grouped by the CLI exit code they map to: configuration
/// problems (1), data problems (2) and numerical failures (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("load error for trial `{trial}`: {reason}")]
    Load { trial: String, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("epoch error: {0}")]
    Epoch(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("triplet error: {0}")]
    Triplet(String),

    #[error("adaptation error: {0}")]
    Adaptation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
