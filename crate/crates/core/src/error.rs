use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite training loss at step {step} (gamma_t = {gamma:?}, noise term = {noise}, psf term = {psf})")]
    NonFiniteLoss {
        step: u64,
        gamma: Vec<f64>,
        noise: f64,
        psf: f64,
    },

    #[error("unmatched files between result and ground-truth sets: {0:?}")]
    Unmatched(Vec<String>),

    #[error("LPIPS plug-in failed: {0}")]
    Plugin(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Config { .. } => "E_CONFIG",
            Error::Dataset(_) => "E_DATASET",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::NonFiniteLoss { .. } => "E_LOSS",
            Error::Unmatched(_) => "E_UNMATCHED",
            Error::Plugin(_) => "E_PLUGIN",
            Error::Io { .. } => "E_IO",
            Error::Image { .. } => "E_IMAGE",
            Error::Json(_) => "E_JSON",
        }
    }
}
