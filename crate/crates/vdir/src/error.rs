//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch size {size} exceeds image dimensions {h}x{w}")]
    PatchTooLarge { size: usize, h: usize, w: usize },

    #[error("rotation requested on a non-square {h}x{w} patch")]
    NonSquareRotation { h: usize, w: usize },

    #[error("spatial dims {h}x{w} not usable here: {need}")]
    BadSpatialDims { h: usize, w: usize, need: String },

    #[error("shape mismatch: {left:?} vs {right:?} in {ctx}")]
    ShapeMismatch {
        left: [usize; 4],
        right: [usize; 4],
        ctx: String,
    },

    #[error("negative noise level {sigma}")]
    NegativeSigma { sigma: f64 },

    #[error("loss diverged: term `{term}` is non-finite at iteration {iter}")]
    DivergedLoss { term: String, iter: u64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    CkptFormat(String),

    #[error("checkpoint incompatible: {0}")]
    CkptCompat(String),

    #[error("image too small for SSIM: {h}x{w} (need at least 11x11)")]
    TooSmallForSsim { h: usize, w: usize },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image decode/encode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 artifact/compat, 4 diverged, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::EmptyDataset => 2,
            Error::CkptFormat(_) | Error::CkptCompat(_) => 3,
            Error::DivergedLoss { .. } => 4,
            _ => 1,
        }
    }
}
