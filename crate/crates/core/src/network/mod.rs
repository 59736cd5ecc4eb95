//! Siamese U-Net damage assessment networks and their checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Differencing, Fusion, NetworkConfig, Variant};
pub use model::{ForwardVars, NamedParam, NamedStats, Network, Prediction};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
    #[error("input shaped {got:?}, expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter '{0}' has no gradient")]
    MissingGradient(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
