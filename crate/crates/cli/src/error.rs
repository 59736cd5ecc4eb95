use suna_core::datapipe::DataError;
use suna_core::inference::InferenceError;
use suna_core::network::{CheckpointError, NetworkError};
use suna_core::objectives::ObjectiveError;
use suna_core::trainer::TrainError;
use suna_core::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// Single-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }

    /// Prefixes the message with `context`, keeping the category.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{context}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{context}: {m}")),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::MissingTensor(_)
            | CheckpointError::UnexpectedTensor(_)
            | CheckpointError::ShapeMismatch { .. }
            | CheckpointError::MalformedConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Tensor(t) => t.into(),
            NetworkError::Checkpoint(c) => c.into(),
            NetworkError::InputShape { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Tensor(t) => t.into(),
            ObjectiveError::InvalidWeights(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Network(n) => n.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Objective(o) => o.into(),
            TrainError::Data(d) => d.into(),
            TrainError::EmptyTrainSplit | TrainError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Network(n) => n.into(),
            InferenceError::NoAttention(_) | InferenceError::QueryOutOfBounds { .. } | InferenceError::InvalidStride { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}
