use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum GsogError {
    #[error("variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),

    #[error("weight must be positive and finite, got {0}")]
    NonPositiveWeight(f64),

    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("mixture must contain at least one component")]
    EmptyMixture,

    #[error("quaternion for joint {joint} has zero (or non-finite) norm")]
    ZeroQuaternion { joint: usize },

    #[error("pose has wrong size: expected {expected}, got {got}")]
    PoseLength { expected: usize, got: usize },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GsogError>;

impl GsogError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GsogError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        GsogError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
