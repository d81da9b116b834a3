use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("missing mask for image `{0}`")]
    MissingMask(String),

    #[error("mask of `{id}` contains value {value} outside the class universe")]
    MaskValueOutsideUniverse { id: String, value: u8 },

    #[error("mask of `{id}` is {mask_h}x{mask_w} but the image is {img_h}x{img_w}")]
    MaskShape {
        id: String,
        img_h: usize,
        img_w: usize,
        mask_h: usize,
        mask_w: usize,
    },

    #[error("class {class_id} has {available} samples but {required} are needed")]
    NotEnoughSamples {
        class_id: u8,
        available: usize,
        required: usize,
    },

    #[error("class {0} is not part of the requested class partition")]
    ClassLeak(u8),

    #[error("invalid split config: {0}")]
    SplitConfig(String),

    #[error("fold {fold} out of range (num_folds = {num_folds})")]
    FoldOutOfRange { fold: usize, num_folds: usize },

    #[error("empty region: class {0} absent from mask")]
    EmptyRegion(i64),

    #[error("empty supervision: every pixel is ignore")]
    EmptySupervision,

    #[error("score map needs at least two prototypes, got {0}")]
    DegenerateSoftmax(usize),

    #[error("empty representative set")]
    EmptyRepSet,

    #[error("k-means needs at least k = {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },

    #[error("no background prototypes available")]
    NoBackground,

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: usize, term: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("architecture `{0}` has no implementation in this build")]
    UnsupportedArch(String),

    #[error("region bank is empty")]
    EmptyBank,

    #[error("unsatisfiable layout: {0}")]
    Layout(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
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

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
