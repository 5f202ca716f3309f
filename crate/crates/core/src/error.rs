use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion norm {norm:e} is below 1e-12")]
    DegenerateRotation { norm: f64 },

    #[error("degenerate covariance: determinant {det:e} is not positive")]
    DegenerateCovariance { det: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("non-finite gradient at parameter {index} ({group}): {value}")]
    NonFiniteGradient {
        index: usize,
        group: &'static str,
        value: f64,
    },

    #[error("fit diverged at step {step}: loss {loss:e} stayed above 10x the initial loss {initial:e}")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        report: Box<crate::fit::FitReport>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for IO faults, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } => 2,
            _ => 1,
        }
    }
}
