use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image has zero extent ({height}x{width})")]
    EmptyImage { height: usize, width: usize },

    #[error("buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("image {height}x{width} is smaller than the largest filter ({filter})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        filter: usize,
    },

    #[error("invalid filter size {0}: must be odd and at least 9")]
    InvalidFilterSize(usize),

    #[error("invalid box filter: {0}")]
    InvalidFilter(&'static str),

    #[error("keypoint {index} is out of bounds or refers to a missing scale")]
    KeypointOutOfRange { index: usize },

    #[error("need at least {needed} matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },

    #[error("degenerate point configuration")]
    DegenerateConfiguration,

    #[error("loss `{0}` has no image-space gradient")]
    InvalidLoss(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported image format for {0}")]
    UnsupportedFormat(PathBuf),

    #[error("malformed tensor file: {0}")]
    MalformedTensor(String),

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
