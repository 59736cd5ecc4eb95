use rand::Rng;

use super::scene::SamplePair;
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Random horizontal and vertical flips, shared by both frames.
    pub flips: bool,
    /// Multiplicative brightness range.
    pub brightness: (f32, f32),
    /// Contrast scale range around the per-channel mean.
    pub contrast: (f32, f32),
    /// Smallest kept fraction of each side in crop-and-resize; 1 disables
    /// cropping.
    pub min_crop: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            min_crop: 0.875,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        Self {
            flips: false,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            min_crop: 1.0,
        }
    }
}

fn flip_planes<T: Copy>(data: &mut [T], p: usize, horizontal: bool) {
    for plane in data.chunks_mut(p * p) {
        if horizontal {
            for row in plane.chunks_mut(p) {
                row.reverse();
            }
        } else {
            for r in 0..p / 2 {
                let (top, bottom) = plane.split_at_mut((p - 1 - r) * p);
                top[r * p..(r + 1) * p].swap_with_slice(&mut bottom[..p]);
            }
        }
    }
}

fn flip(sample: &mut SamplePair, horizontal: bool) {
    let p = sample.size;
    flip_planes(sample.pre.data_mut(), p, horizontal);
    flip_planes(sample.post.data_mut(), p, horizontal);
    flip_planes(&mut sample.pre_labels, p, horizontal);
    flip_planes(&mut sample.labels, p, horizontal);
}

/// Mirrors columns of both frames and both label rasters.
pub fn flip_horizontal(sample: &mut SamplePair) {
    flip(sample, true);
}

/// Mirrors rows of both frames and both label rasters.
pub fn flip_vertical(sample: &mut SamplePair) {
    flip(sample, false);
}

fn draw(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Crops `(top, left, h, w)` from a frame and its labels and scales back to
/// `P×P` (bilinear for the image, nearest for labels).
fn crop_resize(img: &mut Tensor<f32>, labels: &mut [u8], p: usize, (top, left, ch, cw): (usize, usize, usize, usize)) {
    let mut crop = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for r in 0..ch {
            let start = (c * p + top + r) * p + left;
            crop.extend_from_slice(&img.data()[start..start + cw]);
        }
    }
    let resized = resize_bilinear(&crop, 3, (ch, cw), (p, p));
    img.data_mut().copy_from_slice(&resized);
    let src = labels.to_vec();
    for r in 0..p {
        let sr = top + ((2 * r + 1) * ch / (2 * p)).min(ch - 1);
        for c in 0..p {
            let sc = left + ((2 * c + 1) * cw / (2 * p)).min(cw - 1);
            labels[r * p + c] = src[sr * p + sc];
        }
    }
}

fn jitter(img: &mut Tensor<f32>, p: usize, brightness: f32, contrast: f32) {
    for plane in img.data_mut().chunks_mut(p * p) {
        let mean = plane.iter().sum::<f32>() / plane.len() as f32;
        for v in plane {
            *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
        }
    }
}

fn frame(img: &mut Tensor<f32>, labels: &mut [u8], p: usize, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if cfg.min_crop < 1.0 {
        let side = |rng: &mut _| {
            let lo = ((cfg.min_crop * p as f32).ceil() as usize).clamp(1, p);
            rng_range(rng, lo, p)
        };
        let (ch, cw) = (side(rng), side(rng));
        let (top, left) = (rng_range(rng, 0, p - ch), rng_range(rng, 0, p - cw));
        if (ch, cw) != (p, p) {
            crop_resize(img, labels, p, (top, left, ch, cw));
        }
    }
    let b = draw(rng, cfg.brightness);
    let c = draw(rng, cfg.contrast);
    if b != 1.0 || c != 1.0 {
        jitter(img, p, b, c);
    }
}

fn rng_range(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Train-time augmentation. Flips are shared; crop and color jitter are
/// drawn independently for the pre and post frames.
pub fn augment(mut sample: SamplePair, cfg: &AugmentConfig, rng: &mut impl Rng) -> SamplePair {
    let p = sample.size;
    if cfg.flips {
        if rng.random_bool(0.5) {
            flip_horizontal(&mut sample);
        }
        if rng.random_bool(0.5) {
            flip_vertical(&mut sample);
        }
    }
    frame(&mut sample.pre, &mut sample.pre_labels, p, cfg, rng);
    frame(&mut sample.post, &mut sample.labels, p, cfg, rng);
    sample
}
