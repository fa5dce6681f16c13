//! Anchor-grid detector with linear heads over closed-form window features.

pub mod anchors;
pub mod features;
pub mod loss;
pub mod model;
pub mod predict;
pub mod train;

use thiserror::Error;

pub use anchors::{build_anchors, match_anchors, AnchorConfig, AnchorError, AnchorGrid, GtInstance, MatchLabel};
pub use loss::{assemble_loss, loss_and_grad, AnchorTargets, LossBreakdown, LossConfig};
pub use model::{forward, Outputs, Params};
pub use predict::{predict, DEFAULT_NMS_IOU, DEFAULT_SCORE_FLOOR};
pub use train::{train, train_with, LrStep, StepTelemetry, TrainState, TrainingConfig};

use crate::corpus::CorpusError;
use crate::sampler::SamplerError;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("feature dimension {got} does not match parameters ({expected})")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("training set has no images")]
    EmptyDataset,
    #[error("image size {got:?} differs from {expected:?}")]
    MixedImageSizes { expected: (u32, u32), got: (u32, u32) },
    #[error("real and synthetic datasets have different categories")]
    CategoryMismatch,
    #[error("unknown category {0}")]
    UnknownCategory(u64),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
