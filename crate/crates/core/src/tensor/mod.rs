//! Dense tensors and a tape-based reverse-mode autodiff graph.
//!
//! All image-like tensors are batch-leading `N×C×H×W`. Every operation on a
//! [`Graph`] records its inputs so [`Graph::backward`] can walk the tape in
//! reverse insertion order, visiting each node once.

mod dense;
mod error;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod scalar;

pub use dense::Tensor;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{BatchNormOptions, Graph, Mode, RunningStats, Var};
pub use scalar::Scalar;

/// Resamples `planes` stacked `h×w` planes to `oh×ow` with half-pixel
/// bilinear interpolation (no gradient).
pub fn resize_bilinear<T: Scalar>(data: &[T], planes: usize, from: (usize, usize), to: (usize, usize)) -> Vec<T> {
    kernels::bilinear_forward(data, planes, from, to)
}
