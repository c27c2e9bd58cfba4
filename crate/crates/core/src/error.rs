use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),

    #[error("PLY vertex data does not match header: expected {expected} bytes, found {found}")]
    PropertyCountMismatch { expected: usize, found: usize },

    #[error("scene carries {found} obj_code properties but {expected} classes were requested")]
    ClassCountMismatch { expected: usize, found: usize },

    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: u32, reason: String },

    #[error("camera file {path}: {source}")]
    CameraJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("label map {path}: {reason}")]
    InvalidLabelMap { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("nothing to evaluate: {0}")]
    EmptyMetric(String),

    #[error("loss became non-finite at iteration {iteration} (view {view}): {value}")]
    NonFiniteLoss { iteration: usize, view: u32, value: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
