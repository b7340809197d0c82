use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid ray: {0}")]
    InvalidRay(String),

    #[error("invalid interval [{s}, {t}]")]
    InvalidInterval { s: f64, t: f64 },

    #[error("sphere index is stale (index radius {index_radius}, cloud radius {cloud_radius})")]
    StaleIndex { index_radius: f64, cloud_radius: f64 },

    #[error("implicit field returned a non-finite value at ({x}, {y}, {z})")]
    NonFiniteField { x: f64, y: f64, z: f64 },

    #[error("training loss or gradient became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("every sphere in the cloud is empty; the cloud and field have diverged")]
    AllSpheresEmpty,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("no sphere projects into any training view")]
    NoValidRays,

    #[error("the field has no sign change at level {level} on the extraction grid")]
    EmptyLevelSet { level: f64 },

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn non_finite(x: &nalgebra::Vector3<f64>) -> Self {
        Error::NonFiniteField {
            x: x.x,
            y: x.y,
            z: x.z,
        }
    }
}
