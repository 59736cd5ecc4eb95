use std::path::Path;

use image::{GrayImage, Luma, Rgba, RgbaImage};

use super::attention_export::HeatRaster;
use super::scene::SceneOutput;
use super::vote::MaskRaster;
use super::InferenceError;

/// RGBA colors of damage classes 1..=4; background is transparent.
pub const PALETTE: [[u8; 4]; 4] = [
    [0, 176, 80, 255],
    [255, 165, 0, 255],
    [128, 0, 160, 255],
    [255, 105, 180, 255],
];

fn save(path: &Path, img: image::DynamicImage) -> Result<(), InferenceError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| InferenceError::Image {
            path: path.to_path_buf(),
            source,
        })
}

impl MaskRaster {
    /// Single channel with the class values.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(y as usize, x as usize)])
        })
    }

    pub fn to_rgba(&self) -> RgbaImage {
        RgbaImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            match self.get(y as usize, x as usize) {
                0 => Rgba([0, 0, 0, 0]),
                c => Rgba(PALETTE[usize::from(c - 1).min(3)]),
            }
        })
    }
}

fn binary(mask: &[bool], h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[y as usize * w + x as usize] { 255 } else { 0 }]))
}

/// Writes `damage.png`, `damage_rgb.png`, `seg_pre.png` and `seg_post.png`.
pub fn write_scene_outputs(dir: &Path, out: &SceneOutput) -> Result<(), InferenceError> {
    std::fs::create_dir_all(dir).map_err(|source| InferenceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    save(&dir.join("damage.png"), out.damage.to_gray().into())?;
    save(&dir.join("damage_rgb.png"), out.damage.to_rgba().into())?;
    save(&dir.join("seg_pre.png"), binary(&out.seg_pre, out.height, out.width).into())?;
    save(&dir.join("seg_post.png"), binary(&out.seg_post, out.height, out.width).into())
}

/// 8-bit grayscale heat map.
pub fn write_heat_png(path: &Path, heat: &HeatRaster) -> Result<(), InferenceError> {
    let s = heat.size as u32;
    let img = GrayImage::from_fn(s, s, |x, y| {
        Luma([(heat.get(y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    save(path, img.into())
}
