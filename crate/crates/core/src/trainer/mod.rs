//! Adam training with a linearly decaying learning rate, validation and
//! checkpointing.

mod adam;
mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use train::{evaluate, lr_schedule, EpochRecord, TrainConfig, TrainData, Trainer, HISTORY_HEADER};

use crate::datapipe::DataError;
use crate::network::{CheckpointError, NetworkError};
use crate::objectives::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch} outside 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("non-finite value at epoch {epoch}, batch {batch}: {term}")]
    NonFinite { epoch: usize, batch: usize, term: String },
    #[error("parameter '{0}' has no gradient")]
    MissingGradient(String),
    #[error("optimizer state does not match parameter '{0}'")]
    StateMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
}
