//! Graph isomorphism networks with optional edge-weight embeddings and
//! self-attention pooling, on top of the tape in [`crate::autodiff`].

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use layers::{gin_conv, gine_conv, readout, sag_pool, Pooled, Topology};
pub use model::{check_model_gradients, forward_model, predict, ModelOutput, Prediction};
pub use params::{ConvParams, LayerParams, ModelParams, ScoreParams};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("expected input width {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter set does not match the model: {0}")]
    ParamMismatch(String),
}
