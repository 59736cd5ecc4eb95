//! Scene pairs, patching, dataset splits, augmentation and a synthetic
//! scene generator.

mod augment;
mod io;
mod scene;
mod split;
mod synth;

pub use augment::{augment, flip_horizontal, flip_vertical, AugmentConfig};
pub use io::{load_dataset, load_scene, write_dataset, write_scene};
pub use scene::{patchify, stitch, Batch, PatchDataset, PatchRef, Provenance, SamplePair, ScenePair, NUM_CLASSES};
pub use split::{read_manifest, split, write_manifests, ManifestEntry, Partition, SplitSpec, SplitStrategy};
pub use synth::{synth_generate, synth_generate_with, SynthBuilding, SynthConfig, SynthScene};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("scene '{scene}' is missing {file}")]
    MissingFile { scene: String, file: &'static str },
    #[error("scene '{scene}': {detail}")]
    ExtentMismatch { scene: String, detail: String },
    #[error("scene '{scene}': label value {value} outside 0..=4")]
    LabelOutOfRange { scene: String, value: u8 },
    #[error("scene '{scene}': {file} has unsupported pixel format {format}")]
    PixelFormat {
        scene: String,
        file: &'static str,
        format: String,
    },
    #[error("{height}×{width} extent is not divisible by patch size {patch}")]
    NonDivisible { height: u32, width: u32, patch: u32 },
    #[error("cannot split {items} {what} into 3 partitions")]
    TooFewItems { items: usize, what: &'static str },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynth(String),
    #[error("manifest {path} line {line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}
