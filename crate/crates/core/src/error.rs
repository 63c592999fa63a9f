use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("crop {crop_w}x{crop_h} does not fit in {width}x{height}")]
    CropLargerThanImage {
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },
    #[error("unknown filter `{0}`")]
    UnknownFilter(String),
    #[error("invalid filter catalog: {0}")]
    Catalog(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("loss node has {0} elements, expected a scalar")]
    LossNotScalar(usize),
    #[error("input side {side} is too small for the {arch} stack")]
    IncompatibleInputSize { arch: String, side: usize },
    #[error("model has no category head")]
    NoCategoryHead,
    #[error("model has no fusion layer")]
    MissingFusionLayer,
    #[error("model has no quality head")]
    NoQualityHead,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid pair design: {0}")]
    InvalidDesign(String),
    #[error("incomplete labels for reference {ref_id}: {detail}")]
    IncompleteLabels { ref_id: String, detail: String },
    #[error("reference {ref_id} has an `error` verdict for {a} vs {b}")]
    ErrorVerdictPresent { ref_id: String, a: String, b: String },
    #[error("too few references: {0}")]
    TooFewReferences(String),
    #[error("missing filtered image {0}")]
    MissingFilteredImage(String),
    #[error("test reference {0} found in the training stream")]
    DataLeakage(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    DivergenceDetected { epoch: usize, batch: usize, loss: f64 },
    #[error("model mode mismatch: {0}")]
    ModelModeMismatch(String),
    #[error("no ground truth for reference {0}")]
    MissingGroundTruth(String),
    #[error("empty source")]
    EmptySource,
    #[error("only {available} pending pairs, a HIT needs {needed}")]
    InsufficientPendingPairs { available: usize, needed: usize },
    #[error("unknown HIT {0}")]
    UnknownHit(String),
    #[error("HIT {0} is already closed")]
    AlreadyClosed(String),
    #[error("invalid submission: {0}")]
    InvalidSubmission(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed record at line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::Decode(_) => "DecodeError",
            Error::ZeroDimension { .. } => "ZeroDimension",
            Error::CropLargerThanImage { .. } => "CropLargerThanImage",
            Error::UnknownFilter(_) => "UnknownFilter",
            Error::Catalog(_) => "CatalogError",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::LossNotScalar(_) => "LossNotScalar",
            Error::IncompatibleInputSize { .. } => "IncompatibleInputSize",
            Error::NoCategoryHead => "NoCategoryHead",
            Error::MissingFusionLayer => "MissingFusionLayer",
            Error::NoQualityHead => "NoQualityHead",
            Error::DimMismatch(..) => "DimMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::InvalidDesign(_) => "InvalidDesign",
            Error::IncompleteLabels { .. } => "IncompleteLabels",
            Error::ErrorVerdictPresent { .. } => "ErrorVerdictPresent",
            Error::TooFewReferences(_) => "TooFewReferences",
            Error::MissingFilteredImage(_) => "MissingFilteredImage",
            Error::DataLeakage(_) => "DataLeakage",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::ModelModeMismatch(_) => "ModelModeMismatch",
            Error::MissingGroundTruth(_) => "MissingGroundTruth",
            Error::EmptySource => "EmptySource",
            Error::InsufficientPendingPairs { .. } => "InsufficientPendingPairs",
            Error::UnknownHit(_) => "UnknownHit",
            Error::AlreadyClosed(_) => "AlreadyClosed",
            Error::InvalidSubmission(_) => "InvalidSubmission",
            Error::Config(_) => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Manifest { .. } => "ManifestError",
            Error::Io(_) => "IOFailure",
            Error::Json(_) => "JsonError",
        }
    }
}
