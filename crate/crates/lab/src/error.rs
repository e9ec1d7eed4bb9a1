use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("numerical failure: {0}")]
    Numerical(sdd_core::Error),
    #[error(transparent)]
    Core(sdd_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// 0 success, 1 config, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 1,
            LabError::Io { .. } | LabError::Format { .. } => 2,
            LabError::Numerical(_) => 3,
            LabError::Core(_) => 1,
        }
    }
}

impl From<sdd_core::Error> for LabError {
    fn from(e: sdd_core::Error) -> Self {
        match e {
            sdd_core::Error::NonFinite { .. } => LabError::Numerical(e),
            sdd_core::Error::InvalidArgument { ref name, ref reason } => LabError::Config(format!("{name}: {reason}")),
            other => LabError::Core(other),
        }
    }
}
