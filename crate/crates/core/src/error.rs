use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("capacity exceeded: requested {requested} distinct pairs but only {available} exist")]
    Capacity { requested: u64, available: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite values in `{layer}` ({context})")]
    Numeric { layer: String, context: String },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn numeric(layer: impl Into<String>, context: impl Into<String>) -> Self {
        Error::Numeric {
            layer: layer.into(),
            context: context.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Capacity { .. } => 2,
            Error::Numeric { .. } | Error::Degenerate(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
