use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SaltError> = std::result::Result<T, E>;

/// Error kinds shared by every module. The variant decides the CLI exit code.
#[derive(Debug, Error)]
pub enum SaltError {
    /// Bad caller input: empty sequences, over-length input, dimension mismatch.
    #[error("input error: {0}")]
    Input(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent data files.
    #[error("data error: {0}")]
    Data(String),
    /// A broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),
    /// Failure while running a model (divergence, backend failure).
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SaltError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Self::Internal(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Input(_) | Self::Data(_) | Self::Io { .. } => 3,
            Self::Internal(_) | Self::Runtime(_) => 4,
        }
    }
}
