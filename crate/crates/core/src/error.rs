use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("insufficient cases: required {required}, available {available}")]
    InsufficientCases { required: usize, available: usize },

    #[error("constant volume cannot be normalized")]
    ConstantVolume,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("architecture mismatch at tensor `{0}`")]
    ArchitectureMismatch(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("refusing to overwrite {0}: manifest differs (use --force)")]
    ManifestConflict(PathBuf),

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Coarse category used for process exit codes and FFI status codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape(_) => ErrorCategory::Shape,
            Error::InvalidArgument(_)
            | Error::Generation(_)
            | Error::InsufficientCases { .. }
            | Error::ConstantVolume
            | Error::Degenerate(_)
            | Error::Config(_) => ErrorCategory::InvalidInput,
            Error::NonFinite(_) | Error::Diverged { .. } => ErrorCategory::Numeric,
            Error::ArchitectureMismatch(_) | Error::Format { .. } | Error::Json(_) => {
                ErrorCategory::Format
            }
            Error::ManifestConflict(_) | Error::NotFound(_) | Error::Io(_) => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    InvalidInput,
    Shape,
    Numeric,
    Format,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::InvalidInput => 2,
            ErrorCategory::Shape => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Format => 5,
            ErrorCategory::Io => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::InvalidInput => "invalid-input",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Format => "format",
            ErrorCategory::Io => "io",
        }
    }
}
