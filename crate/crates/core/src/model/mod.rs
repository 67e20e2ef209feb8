//! The self-attentive integration network.

mod config;
pub mod layers;
pub mod network;
mod params;

use thiserror::Error;

use crate::tensor::TensorError;

pub use config::ModelConfig;
pub use layers::{
    aggregate_entities, attention_head, embed_pair, integration_gate, score_content, score_preference,
    GateOutput, HeadTrace,
};
pub use network::{
    backward, forward, forward_batch, joint_loss, predict_scores, BatchNormMode, BatchTrace, ForwardTrace,
    LossBreakdown, Mode, Scores,
};
pub use params::{BatchNormStats, GateParams, HeadParams, ModelShape, SainParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for field {field:?} (size {size})")]
    IndexOutOfRange { field: String, index: usize, size: usize },
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("trace/params mismatch: {0}")]
    TraceMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
