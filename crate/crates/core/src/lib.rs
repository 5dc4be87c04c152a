//! Mask-to-text transcription for change-detection datasets.
//!
//! Ground-truth change masks already encode where a change happened, what
//! changed, how it changed and roughly how much of it there is. This crate
//! reads those masks, extracts one [`SemanticQuadruple`] per change class and
//! renders it through a small set of fixed sentence templates, producing a
//! multimodal (image + text) dataset as JSONL.
//!
//! Alongside the transcription pipeline it carries the numeric pieces used to
//! train and evaluate on such data: cross-attention fusion, the hybrid
//! segmentation loss, a bidirectional InfoNCE loss (all with closed-form
//! gradients and a finite-difference checker) and the semantic change
//! detection metric suite.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod overlay;
pub mod template;
pub mod transcribe;
pub mod types;

pub use error::{Error, Result};
pub use template::{AttributeSelection, Vocabulary};
pub use transcribe::{transcribe_mask, QuantityThresholds};
pub use types::{
    BinaryMask, ChangeClass, ChangeMask, Direction, EmbeddingBatch, Finding, LossWeights, Quantity,
    ScdConfusion, SemanticQuadruple, TextDescription,
};

/// Validates a change mask, returning one finding per violated invariant.
pub fn validate_change_mask(mask: &ChangeMask) -> Vec<Finding> {
    mask.validate()
}
