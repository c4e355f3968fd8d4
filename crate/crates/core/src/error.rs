use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UbrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UbrError {
    #[error("shape mismatch in {op}: axis `{axis}` expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no volume has at least m={m} slices (longest has {max_len})")]
    NoEligibleVolume { m: usize, max_len: usize },

    #[error("unknown volume `{0}`")]
    UnknownVolume(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("checkpoint does not match the run configuration: {0}")]
    CheckpointMismatch(String),

    #[error("calibration labels contain no slice of class {0}")]
    MissingClass(u8),

    #[error("training diverged at iteration {iteration}: total loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
}

impl UbrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        UbrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        UbrError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, err: csv::Error) -> Self {
        let path = path.into();
        if !err.is_io_error() {
            return UbrError::format(path, err.to_string());
        }
        match err.into_kind() {
            csv::ErrorKind::Io(source) => UbrError::Io { path, source },
            _ => unreachable!("checked io error"),
        }
    }
}
