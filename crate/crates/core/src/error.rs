//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed filename `{0}`")]
    MalformedFilename(String),
    #[error("missing directory {}", .0.display())]
    MissingDirectory(PathBuf),
    #[error("split `{0}` has no usable images")]
    EmptySplit(String),
    #[error("need {required} identities with images, found {available}")]
    InsufficientIdentities { required: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} stage outputs, got {got}")]
    StageCountMismatch { expected: usize, got: usize },
    #[error("stage input has no differentiable path to the logits")]
    NoGradientPath,
    #[error("class {class} out of range for {num_classes} classes")]
    InvalidClass { class: usize, num_classes: usize },
    #[error("attribution map is constant ({0})")]
    DegenerateMap(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("K={k} outside 0..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("no sample with a different identity than anchor {0}")]
    NoNegativeAvailable(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("query {0} has no valid true match in the gallery")]
    NoValidGallery(usize),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("{key}: {message}")]
    ConfigValidation { key: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used on the command line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::MalformedFilename(_) => "MalformedFilename",
            Error::MissingDirectory(_) => "MissingDirectory",
            Error::EmptySplit(_) => "EmptySplit",
            Error::InsufficientIdentities { .. } => "InsufficientIdentities",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::StageCountMismatch { .. } => "StageCountMismatch",
            Error::NoGradientPath => "NoGradientPath",
            Error::InvalidClass { .. } => "InvalidClass",
            Error::DegenerateMap(_) => "DegenerateMap",
            Error::GridMismatch(_) => "GridMismatch",
            Error::KOutOfRange { .. } => "KOutOfRange",
            Error::NoNegativeAvailable(_) => "NoNegativeAvailable",
            Error::InvalidLabel { .. } => "InvalidLabel",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::NoValidGallery(_) => "NoValidGallery",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::ConfigValidation { .. } => "ConfigValidation",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io(_) => "Io",
            Error::Image(_) => "Image",
            Error::Tensor(_) => "Tensor",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Error::ConfigValidation {
            key: key.to_string(),
            message: message.into(),
        }
    }
}
