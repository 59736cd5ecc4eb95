//! Weighted segmentation/damage losses and F1 scoring.

mod loss;
mod metrics;

pub use loss::{damage_loss, damage_loss_indices, one_hot_to_indices, seg_loss, total_loss, LossTargets, LossTerms};
pub use metrics::{f1_class, f1_damage, f1_seg, ClassCounts, ConfusionCounts, MetricReport};

/// Probability clamp applied before logarithms.
pub const DEFAULT_DELTA: f64 = 1e-7;
/// Additive guard in the harmonic mean of class F1 scores.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("class weights must be positive: {0}")]
    InvalidWeights(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target at pixel {0} is not one-hot")]
    NotOneHot(usize),
    #[error("class {class} outside 0..{classes}")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Per-class loss weights: `seg = (background, building)`, `damage` indexed
/// by damage class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub seg: [f64; 2],
    pub damage: Vec<f64>,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            seg: [1.0, 10.0],
            damage: vec![1.0, 10.0, 30.0, 30.0, 30.0],
        }
    }
}

impl ClassWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let all = self.seg.iter().chain(&self.damage);
        if self.damage.is_empty() || all.clone().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ObjectiveError::InvalidWeights(format!("{self:?}")));
        }
        Ok(())
    }
}
