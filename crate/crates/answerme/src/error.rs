use std::path::{Path, PathBuf};

use answerme_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, AppError>;

/// Broad failure class; each maps to a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Mismatch { path: PathBuf, reason: String },
    #[error("exclusion audit failed: {train} shares {overlap} scenes with {eval}")]
    Audit {
        train: String,
        eval: String,
        overlap: usize,
    },
    #[error("{path}: refusing to overwrite an existing artifact with different content")]
    Overwrite { path: PathBuf },
    #[error("{path}: directory is locked by another run")]
    Locked { path: PathBuf },
    #[error("{0}")]
    Data(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<AppError>,
    },
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        AppError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            AppError::Core(e) => match e {
                CoreError::NonFiniteLoss { .. } | CoreError::EmptyLoss => ErrorClass::Numeric,
                CoreError::Config(_)
                | CoreError::IndivisibleBatch { .. }
                | CoreError::DuplicateDataset(_)
                | CoreError::NoTasksEnabled
                | CoreError::Scene(_)
                | CoreError::WrongFusion { .. } => ErrorClass::Config,
                _ => ErrorClass::Data,
            },
            AppError::Io { .. } | AppError::Overwrite { .. } | AppError::Locked { .. } => ErrorClass::Io,
            AppError::Config(_) => ErrorClass::Config,
            AppError::Format { .. } | AppError::Mismatch { .. } | AppError::Audit { .. } | AppError::Data(_) => {
                ErrorClass::Data
            }
            AppError::Context { source, .. } => source.class(),
        }
    }
}
