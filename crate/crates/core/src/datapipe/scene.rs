use image::{GrayImage, RgbImage};

use super::DataError;
use crate::tensor::Tensor;

/// Background plus four damage levels.
pub const NUM_CLASSES: usize = 5;

/// Co-registered pre/post images and the damage label raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub pre: RgbImage,
    pub post: RgbImage,
    /// 0 background, 1 no damage, 2 minor, 3 major, 4 destroyed.
    pub labels: GrayImage,
}

impl ScenePair {
    pub fn validate(&self) -> Result<(), DataError> {
        let dims = self.pre.dimensions();
        if self.post.dimensions() != dims || self.labels.dimensions() != dims {
            return Err(DataError::ExtentMismatch {
                scene: self.scene_id.clone(),
                detail: format!(
                    "pre {:?}, post {:?}, labels {:?}",
                    dims,
                    self.post.dimensions(),
                    self.labels.dimensions()
                ),
            });
        }
        if let Some(&value) = self.labels.as_raw().iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(DataError::LabelOutOfRange {
                scene: self.scene_id.clone(),
                value,
            });
        }
        Ok(())
    }

    /// `(height, width)`
    pub fn extent(&self) -> (usize, usize) {
        (self.pre.height() as usize, self.pre.width() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub scene_id: String,
    pub row: usize,
    pub col: usize,
}

/// One training example. Images are `3×P×P` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    /// Class raster under the pre frame's geometry.
    pub pre_labels: Vec<u8>,
    /// Class raster under the post frame's geometry; drives the damage
    /// target and the post building mask.
    pub labels: Vec<u8>,
    pub size: usize,
    pub provenance: Provenance,
}

impl SamplePair {
    pub fn seg_pre(&self) -> Vec<f32> {
        self.pre_labels.iter().map(|&c| f32::from(u8::from(c != 0))).collect()
    }

    pub fn seg_post(&self) -> Vec<f32> {
        self.labels.iter().map(|&c| f32::from(u8::from(c != 0))).collect()
    }

    pub fn damage_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&c| c as usize).collect()
    }

    /// `5×P×P`
    pub fn damage_one_hot(&self) -> Tensor<f32> {
        let plane = self.size * self.size;
        Tensor::from_fn(vec![NUM_CLASSES, self.size, self.size], |i| {
            f32::from(u8::from(self.labels[i % plane] as usize == i / plane))
        })
    }
}

fn rgb_to_tensor(img: &RgbImage, top: usize, left: usize, p: usize) -> Tensor<f32> {
    let w = img.width() as usize;
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, p, p], |i| {
        let (c, r, col) = (i / (p * p), (i / p) % p, i % p);
        f32::from(raw[((top + r) * w + left + col) * 3 + c]) / 255.0
    })
}

fn tensor_to_rgb(t: &Tensor<f32>, img: &mut RgbImage, top: usize, left: usize) {
    let p = t.shape()[1];
    let w = img.width() as usize;
    let raw: &mut [u8] = img;
    for c in 0..3 {
        for r in 0..p {
            for col in 0..p {
                let v = t.data()[(c * p + r) * p + col];
                raw[((top + r) * w + left + col) * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

fn check_divisible(h: usize, w: usize, patch: usize) -> Result<(usize, usize), DataError> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) || h == 0 || w == 0 {
        return Err(DataError::NonDivisible {
            height: h as u32,
            width: w as u32,
            patch: patch as u32,
        });
    }
    Ok((h / patch, w / patch))
}

fn extract(scene: &ScenePair, row: usize, col: usize, p: usize) -> SamplePair {
    let (top, left) = (row * p, col * p);
    let w = scene.labels.width() as usize;
    let labels: Vec<u8> = (0..p * p)
        .map(|i| scene.labels.as_raw()[(top + i / p) * w + left + i % p])
        .collect();
    SamplePair {
        pre: rgb_to_tensor(&scene.pre, top, left, p),
        post: rgb_to_tensor(&scene.post, top, left, p),
        pre_labels: labels.clone(),
        labels,
        size: p,
        provenance: Provenance {
            scene_id: scene.scene_id.clone(),
            row,
            col,
        },
    }
}

/// Row-major grid of non-overlapping `P×P` patches.
pub fn patchify(scene: &ScenePair, patch: usize) -> Result<Vec<SamplePair>, DataError> {
    let (h, w) = scene.extent();
    let (rows, cols) = check_divisible(h, w, patch)?;
    Ok((0..rows * cols).map(|i| extract(scene, i / cols, i % cols, patch)).collect())
}

/// Inverse of [`patchify`] for a row-major `rows×cols` grid.
pub fn stitch(patches: &[SamplePair], rows: usize, cols: usize) -> Result<ScenePair, DataError> {
    let first = patches.first().ok_or(DataError::InvalidSplit("no patches to stitch".into()))?;
    let p = first.size;
    if patches.len() != rows * cols {
        return Err(DataError::ExtentMismatch {
            scene: first.provenance.scene_id.clone(),
            detail: format!("{} patches for a {rows}×{cols} grid", patches.len()),
        });
    }
    let (h, w) = ((rows * p) as u32, (cols * p) as u32);
    let mut pre = RgbImage::new(w, h);
    let mut post = RgbImage::new(w, h);
    let mut labels = GrayImage::new(w, h);
    for (i, s) in patches.iter().enumerate() {
        let (top, left) = ((i / cols) * p, (i % cols) * p);
        tensor_to_rgb(&s.pre, &mut pre, top, left);
        tensor_to_rgb(&s.post, &mut post, top, left);
        for (j, &v) in s.labels.iter().enumerate() {
            labels.put_pixel((left + j % p) as u32, (top + j / p) as u32, image::Luma([v]));
        }
    }
    Ok(ScenePair {
        scene_id: first.provenance.scene_id.clone(),
        pre,
        post,
        labels,
    })
}

/// Location of one patch: `index` is the row-major position in its scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub scene: usize,
    pub index: usize,
}

/// Scenes kept as 8-bit rasters; patches are cut on demand.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    scenes: Vec<ScenePair>,
    patch: usize,
    grid: Vec<(usize, usize)>,
    refs: Vec<PatchRef>,
}

impl PatchDataset {
    pub fn new(scenes: Vec<ScenePair>, patch: usize) -> Result<Self, DataError> {
        let mut grid = Vec::with_capacity(scenes.len());
        let mut refs = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            scene.validate()?;
            let (h, w) = scene.extent();
            let (rows, cols) = check_divisible(h, w, patch)?;
            grid.push((rows, cols));
            refs.extend((0..rows * cols).map(|index| PatchRef { scene: s, index }));
        }
        Ok(Self {
            scenes,
            patch,
            grid,
            refs,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn scenes(&self) -> &[ScenePair] {
        &self.scenes
    }

    pub fn patch_refs(&self) -> &[PatchRef] {
        &self.refs
    }

    pub fn scene_of(&self, i: usize) -> &str {
        &self.scenes[self.refs[i].scene].scene_id
    }

    pub fn sample(&self, i: usize) -> SamplePair {
        let r = self.refs[i];
        let cols = self.grid[r.scene].1;
        extract(&self.scenes[r.scene], r.index / cols, r.index % cols, self.patch)
    }

    /// Position of `(scene_id, patch index)` in [`Self::patch_refs`].
    pub fn find(&self, scene_id: &str, index: usize) -> Option<usize> {
        let s = self.scenes.iter().position(|sc| sc.scene_id == scene_id)?;
        self.refs.iter().position(|r| r.scene == s && r.index == index)
    }
}

/// Stacked network inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B×3×P×P`
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub seg_pre: Vec<f32>,
    pub seg_post: Vec<f32>,
    pub damage: Vec<usize>,
    pub building: Vec<bool>,
}

impl Batch {
    pub fn collate(samples: &[SamplePair]) -> Self {
        let pre: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.pre).collect();
        let post: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.post).collect();
        Self {
            pre: Tensor::stack(&pre).expect("equal patch shapes"),
            post: Tensor::stack(&post).expect("equal patch shapes"),
            seg_pre: samples.iter().flat_map(SamplePair::seg_pre).collect(),
            seg_post: samples.iter().flat_map(SamplePair::seg_post).collect(),
            damage: samples.iter().flat_map(SamplePair::damage_indices).collect(),
            building: samples.iter().flat_map(|s| s.labels.iter().map(|&c| c != 0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pre.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
