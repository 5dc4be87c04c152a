use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("pixel ({x}, {y}) outside {width}x{height} raster")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("invalid quantity thresholds: {0}")]
    InvalidThresholds(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("invalid weight: {0}")]
    InvalidWeight(String),
    #[error("invalid probability map: {0}")]
    InvalidProbabilities(String),
    #[error("invalid template id {0} (expected 1-5)")]
    InvalidTemplate(u8),
    #[error("sentence matches no template (failed at byte {position}): {sentence:?}")]
    ParseFailure { position: usize, sentence: String },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("mask value {0} has no palette entry")]
    PaletteGap(u32),
    #[error("cannot decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },
    #[error("label {label} outside 0..={max}")]
    ClassOutOfRange { label: u16, max: usize },
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("unknown operation {0:?}")]
    UnknownOp(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
