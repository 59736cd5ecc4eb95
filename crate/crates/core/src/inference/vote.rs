use super::InferenceError;
use crate::tensor::Tensor;

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if out.last() != Some(&(extent - patch)) {
        out.push(extent - patch);
    }
    out
}

/// Window origins `(row, col)` in row-major order: multiples of `stride`
/// plus a final origin flush with the bottom/right border.
pub fn tile(height: usize, width: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>, InferenceError> {
    if stride == 0 {
        return Err(InferenceError::InvalidStride { stride, patch });
    }
    if height < patch || width < patch || patch == 0 {
        return Err(InferenceError::TooSmall { height, width, patch });
    }
    let rows = axis_origins(height, patch, stride);
    let cols = axis_origins(width, patch, stride);
    let gap = |o: &[usize]| o.windows(2).any(|w| w[1] - w[0] > patch);
    if gap(&rows) || gap(&cols) {
        return Err(InferenceError::InvalidStride { stride, patch });
    }
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Per-pixel damage classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRaster {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl MaskRaster {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }
}

/// Running class-probability sums and window counts over a full scene.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteGrid {
    classes: usize,
    height: usize,
    width: usize,
    sums: Vec<f64>,
    coverage: Vec<u32>,
}

impl VoteGrid {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            sums: vec![0.0; classes * height * width],
            coverage: vec![0; height * width],
        }
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Adds a `C×P×P` window of probabilities at `origin`.
    pub fn add(&mut self, (row, col): (usize, usize), patch: usize, probs: &[f32]) -> Result<(), InferenceError> {
        if row + patch > self.height || col + patch > self.width {
            return Err(InferenceError::WindowOutOfBounds {
                row,
                col,
                patch,
                height: self.height,
                width: self.width,
            });
        }
        let plane = patch * patch;
        if probs.len() != self.classes * plane {
            return Err(InferenceError::WindowShape {
                expected: self.classes * plane,
                got: probs.len(),
            });
        }
        let full = self.height * self.width;
        for r in 0..patch {
            let base = (row + r) * self.width + col;
            for c in 0..patch {
                self.coverage[base + c] += 1;
            }
            for k in 0..self.classes {
                let src = &probs[k * plane + r * patch..k * plane + (r + 1) * patch];
                let dst = &mut self.sums[k * full + base..k * full + base + patch];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += f64::from(s);
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &VoteGrid) {
        assert_eq!(
            (self.classes, self.height, self.width),
            (other.classes, other.height, other.width),
            "vote grid extents differ"
        );
        self.sums.iter_mut().zip(&other.sums).for_each(|(a, b)| *a += b);
        self.coverage.iter_mut().zip(&other.coverage).for_each(|(a, b)| *a += b);
    }

    fn check_covered(&self) -> Result<(), InferenceError> {
        match self.coverage.iter().position(|&c| c == 0) {
            Some(i) => Err(InferenceError::Uncovered {
                row: i / self.width,
                col: i % self.width,
            }),
            None => Ok(()),
        }
    }

    /// Argmax of the summed probabilities, lowest class on ties.
    pub fn finalize(&self) -> Result<MaskRaster, InferenceError> {
        self.check_covered()?;
        let full = self.height * self.width;
        let classes = (0..full)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.sums[k * full + p] > self.sums[best * full + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Ok(MaskRaster {
            height: self.height,
            width: self.width,
            classes,
        })
    }

    /// Per-pixel mean of channel `class` over covering windows.
    pub fn mean(&self, class: usize) -> Result<Vec<f64>, InferenceError> {
        self.check_covered()?;
        let full = self.height * self.width;
        Ok((0..full).map(|p| self.sums[class * full + p] / f64::from(self.coverage[p])).collect())
    }
}

/// Sums `C×P×P` windows over an `height×width` grid and takes the argmax.
pub fn vote_fuse(
    height: usize,
    width: usize,
    windows: &[((usize, usize), Tensor<f32>)],
) -> Result<MaskRaster, InferenceError> {
    let Some((_, first)) = windows.first() else {
        return Err(InferenceError::Uncovered { row: 0, col: 0 });
    };
    let s = first.shape();
    let (classes, patch) = (s[0], s[s.len() - 1]);
    let mut grid = VoteGrid::new(classes, height, width);
    for (origin, t) in windows {
        grid.add(*origin, patch, t.data())?;
    }
    grid.finalize()
}
