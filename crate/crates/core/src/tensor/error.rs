use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: output extent ({extent} + 2*{padding} - {kernel}) / {stride} is not integral")]
    NonIntegralExtent {
        op: &'static str,
        extent: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("{op}: spatial extent {height}x{width} is not divisible by the window")]
    OddExtent {
        op: &'static str,
        height: usize,
        width: usize,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any trainable leaf")]
    Detached,

    #[error("variable belongs to a different graph")]
    ForeignVar,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
