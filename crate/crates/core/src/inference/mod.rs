//! Moving-window scene prediction with probability voting, and attention
//! heat maps for a query pixel.

mod attention_export;
mod render;
mod scene;
mod vote;

pub use attention_export::{export_attention, HeatRaster};
pub use render::{write_heat_png, write_scene_outputs, PALETTE};
pub use scene::{predict_scene, SceneOutput};
pub use vote::{tile, vote_fuse, MaskRaster, VoteGrid};

use crate::network::{NetworkError, Variant};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("{height}×{width} extent is smaller than the {patch}-pixel window")]
    TooSmall { height: usize, width: usize, patch: usize },
    #[error("stride {stride} leaves pixels outside every {patch}-pixel window")]
    InvalidStride { stride: usize, patch: usize },
    #[error("window at ({row}, {col}) of size {patch} leaves the {height}×{width} grid")]
    WindowOutOfBounds {
        row: usize,
        col: usize,
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("window holds {got} values, expected {expected}")]
    WindowShape { expected: usize, got: usize },
    #[error("pixel ({row}, {col}) is not covered by any window")]
    Uncovered { row: usize, col: usize },
    #[error("variant {0} has no attention block")]
    NoAttention(Variant),
    #[error("query ({row}, {col}) outside the {size}×{size} patch")]
    QueryOutOfBounds { row: usize, col: usize, size: usize },
    #[error("{path}: {source}")]
    Image {
        path: std::path::PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}
