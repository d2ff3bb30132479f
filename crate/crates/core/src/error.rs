use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Two grids, masks or vectors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A persisted file failed validation. `field` names the part that failed.
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    /// Input data is semantically unusable (empty mask, wrong reference count, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite loss during optimisation.
    #[error("non-finite loss at step {step}: loss={loss}, gradient norm={grad_norm}")]
    NonFinite { step: usize, loss: f64, grad_norm: f64 },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// A stage was used before it was trained or calibrated.
    #[error("not calibrated: {0}")]
    Uncalibrated(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    /// Failure inside a named pipeline stage.
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) => 2,
            Error::Shape(_)
            | Error::Format { .. }
            | Error::Data(_)
            | Error::Uncalibrated(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Image { .. } => 3,
            Error::NonFinite { .. } | Error::NoConvergence { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
