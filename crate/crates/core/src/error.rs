use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset cannot be split: {0}")]
    Unsplittable(String),

    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    #[error("decode error in {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("image {width}x{height} is smaller than patch {patch_w}x{patch_h}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch_w: usize,
        patch_h: usize,
    },

    #[error("synthetic placement infeasible: {0}")]
    Placement(String),

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("gradient graph does not belong to this model state")]
    DetachedGraph,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("output directory {0} is not empty (pass --overwrite to replace)")]
    OutputExists(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
