use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mask")]
    EmptyMask,

    #[error("degenerate box")]
    DegenerateBox,

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown class {0}")]
    UnknownClass(u32),

    #[error("prompt group has {got} proposals, expected {expected}")]
    GroupSize { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no ground truth: {0}")]
    NoGroundTruth(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyMask => "empty_mask",
            Error::DegenerateBox => "degenerate_box",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownClass(_) => "unknown_class",
            Error::GroupSize { .. } => "group_size",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoGroundTruth(_) => "no_ground_truth",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Registry(_) => "registry",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
