//! Procedural scene pairs whose damage classes show as pre-to-post changes:
//! untouched roofs (1), a flood strip along one side (2), a flood ring
//! around the whole footprint (3), roofs replaced by rubble (4).
//! Some undamaged and destroyed buildings sit next to ponds present in both
//! frames, so only new water marks flooding.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::ScenePair;
use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub size: usize,
    pub seed: u64,
    /// Relative frequency of damage classes 1..=4.
    pub class_mix: [f64; 4],
    /// Each cell of this side holds at most one building.
    pub cell: usize,
    /// Inclusive building side range in pixels.
    pub building_side: (usize, usize),
    /// Probability a cell holds a building.
    pub occupancy: f64,
    /// Width of the flood strip and ring.
    pub flood_width: usize,
    /// Probability a class-1 or class-4 building gets a pond strip or ring
    /// in both frames.
    pub pond_rate: f64,
}

impl SynthConfig {
    pub fn new(n_scenes: usize, size: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            size,
            seed,
            class_mix: [0.25; 4],
            cell: 32,
            building_side: (8, 16),
            occupancy: 0.75,
            flood_width: 4,
            pond_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSynth(m));
        if self.size == 0 || self.cell == 0 || !self.size.is_multiple_of(self.cell) {
            return bad(format!("size {} must be a positive multiple of the {}-pixel cell", self.size, self.cell));
        }
        let (lo, hi) = self.building_side;
        if lo < 2 || lo > hi || hi + 2 * self.flood_width + 2 > self.cell {
            return bad(format!("building sides {lo}..={hi} do not fit a {}-pixel cell", self.cell));
        }
        if self.class_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("class mix {:?}", self.class_mix));
        }
        if !(0.0..=1.0).contains(&self.occupancy) {
            return bad(format!("occupancy {}", self.occupancy));
        }
        if !(0.0..=1.0).contains(&self.pond_rate) {
            return bad(format!("pond rate {}", self.pond_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthBuilding {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub pair: ScenePair,
    pub buildings: Vec<SynthBuilding>,
    /// Row-major flood mask of the post frame.
    pub flood: Vec<bool>,
}

/// Scene pairs with the default mixture and layout.
pub fn synth_generate(n_scenes: usize, size: usize, seed: u64) -> Result<Vec<ScenePair>, DataError> {
    Ok(synth_generate_with(&SynthConfig::new(n_scenes, size, seed))?
        .into_iter()
        .map(|s| s.pair)
        .collect())
}

pub fn synth_generate_with(cfg: &SynthConfig) -> Result<Vec<SynthScene>, DataError> {
    cfg.validate()?;
    Ok((0..cfg.n_scenes).map(|i| scene(cfg, i)).collect())
}

/// Largest-remainder apportionment of `k` buildings over the mixture.
fn quotas(k: usize, mix: &[f64; 4]) -> [usize; 4] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|w| w / total * k as f64).collect();
    let mut q = [0usize; 4];
    for (i, e) in exact.iter().enumerate() {
        q[i] = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - q[b] as f64).total_cmp(&(exact[a] - q[a] as f64)).then(a.cmp(&b)));
    let short = k - q.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        q[i] += 1;
    }
    q
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amp: i16) -> Rgb<u8> {
    Rgb(base.map(|c| (i16::from(c) + rng.random_range(-amp..=amp)).clamp(0, 255) as u8))
}

/// Pixels of a `width`-wide ring around `b`, or of a strip along one random side.
fn water_pixels(b: &SynthBuilding, width: usize, ring: bool, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let (top, left, bottom, right) = (b.top, b.left, b.top + b.height, b.left + b.width);
    let rect = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        rows.flat_map(move |r| cols.clone().map(move |c| (r, c))).collect::<Vec<_>>()
    };
    if ring {
        return rect(top - width..bottom + width, left - width..right + width)
            .into_iter()
            .filter(|&(r, c)| !((top..bottom).contains(&r) && (left..right).contains(&c)))
            .collect();
    }
    match rng.random_range(0..4) {
        0 => rect(top - width..top, left..right),
        1 => rect(bottom..bottom + width, left..right),
        2 => rect(top..bottom, left - width..left),
        _ => rect(top..bottom, right..right + width),
    }
}

fn scene(cfg: &SynthConfig, index: usize) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let s = cfg.size as u32;
    let ground = [
        rng.random_range(70..110u8),
        rng.random_range(100..140u8),
        rng.random_range(50..80u8),
    ];
    let mut pre = RgbImage::from_fn(s, s, |_, _| Rgb([0; 3]));
    for px in pre.pixels_mut() {
        *px = jitter(&mut rng, ground, 14);
    }

    let cells = cfg.size / cfg.cell;
    let mut slots = Vec::new();
    for cr in 0..cells {
        for cc in 0..cells {
            if rng.random_bool(cfg.occupancy) {
                slots.push((cr, cc));
            }
        }
    }
    let q = quotas(slots.len(), &cfg.class_mix);
    let mut classes: Vec<u8> = (0..4).flat_map(|c| std::iter::repeat_n(c as u8 + 1, q[c])).collect();
    classes.shuffle(&mut rng);

    let (lo, hi) = cfg.building_side;
    let margin = cfg.flood_width + 1;
    let mut labels = GrayImage::new(s, s);
    let mut buildings = Vec::with_capacity(slots.len());
    for (&(cr, cc), &class) in slots.iter().zip(&classes) {
        let height = rng.random_range(lo..=hi);
        let width = rng.random_range(lo..=hi);
        let top = cr * cfg.cell + rng.random_range(margin..=cfg.cell - height - margin);
        let left = cc * cfg.cell + rng.random_range(margin..=cfg.cell - width - margin);
        let roof = [
            rng.random_range(150..215u8),
            rng.random_range(120..200u8),
            rng.random_range(110..190u8),
        ];
        for r in top..top + height {
            for c in left..left + width {
                pre.put_pixel(c as u32, r as u32, jitter(&mut rng, roof, 6));
                labels.put_pixel(c as u32, r as u32, Luma([class]));
            }
        }
        buildings.push(SynthBuilding {
            top,
            left,
            height,
            width,
            class,
        });
    }

    let n = cfg.size;
    let water = [48u8, 78, 140];
    let fw = cfg.flood_width;
    for b in &buildings {
        if matches!(b.class, 1 | 4) && rng.random_bool(cfg.pond_rate) {
            let ring = rng.random_bool(0.5);
            for (r, c) in water_pixels(b, fw, ring, &mut rng) {
                pre.put_pixel(c as u32, r as u32, jitter(&mut rng, water, 5));
            }
        }
    }

    let mut post = pre.clone();
    // sensor noise on open ground only
    for (x, y, px) in post.enumerate_pixels_mut() {
        if labels.get_pixel(x, y)[0] == 0 && rng.random_bool(0.3) {
            *px = jitter(&mut rng, px.0, 3);
        }
    }
    let mut flood = vec![false; n * n];
    for b in &buildings {
        match b.class {
            2 | 3 => {
                for (r, c) in water_pixels(b, fw, b.class == 3, &mut rng) {
                    flood[r * n + c] = true;
                    post.put_pixel(c as u32, r as u32, jitter(&mut rng, water, 5));
                }
            }
            4 => {
                for r in b.top..b.top + b.height {
                    for c in b.left..b.left + b.width {
                        let v = rng.random_range(40..190u8);
                        let px = Rgb([v, (f32::from(v) * 0.85) as u8, (f32::from(v) * 0.7) as u8]);
                        post.put_pixel(c as u32, r as u32, px);
                    }
                }
            }
            _ => {}
        }
    }

    SynthScene {
        pair: ScenePair {
            scene_id: format!("scene_{index:04}"),
            pre,
            post,
            labels,
        },
        buildings,
        flood,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_round_per_scene() {
        assert_eq!(quotas(10, &[0.25; 4]), [3, 3, 2, 2]);
        assert_eq!(quotas(0, &[0.25; 4]), [0; 4]);
        assert_eq!(quotas(7, &[1.0, 0.0, 0.0, 1.0]), [4, 0, 0, 3]);
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        assert!(synth_generate(1, 0, 0).is_err());
        assert!(synth_generate(1, 48, 0).is_err());
        assert!(synth_generate(0, 64, 0).unwrap().is_empty());
    }
}
