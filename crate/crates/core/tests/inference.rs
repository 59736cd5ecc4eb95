use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use suna_core::datapipe::{patchify, synth_generate, ScenePair};
use suna_core::inference::{
    export_attention, predict_scene, tile, vote_fuse, write_heat_png, write_scene_outputs, InferenceError, MaskRaster,
    VoteGrid, PALETTE,
};
use suna_core::network::{Network, NetworkConfig, Variant};
use suna_core::Tensor;

fn small(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        input_size: 16,
        channel_widths: vec![4, 8, 8],
        attention_resolution: 4,
        ..NetworkConfig::desk(variant)
    }
}

fn window(rng: &mut ChaCha8Rng, classes: usize, p: usize) -> Tensor {
    let mut t = Tensor::from_fn(vec![classes, p, p], |_| rng.random_range(0.01f32..1.0));
    let plane = p * p;
    for px in 0..plane {
        let s: f32 = (0..classes).map(|c| t.data()[c * plane + px]).sum();
        for c in 0..classes {
            t.data_mut()[c * plane + px] /= s;
        }
    }
    t
}

fn argmax_window(t: &Tensor) -> Vec<u8> {
    let (c, plane) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    (0..plane)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if t.data()[k * plane + px] > t.data()[best * plane + px] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

fn brute_force(h: usize, w: usize, windows: &[((usize, usize), Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut sums = [0f64; 5];
            for ((or, oc), t) in windows {
                let p = t.shape()[1];
                if (*or..or + p).contains(&r) && (*oc..oc + p).contains(&c) {
                    for (k, s) in sums.iter_mut().enumerate() {
                        *s += f64::from(t.data()[(k * p + r - or) * p + c - oc]);
                    }
                }
            }
            let mut best = 0;
            for k in 1..5 {
                if sums[k] > sums[best] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[test]
fn tile_examples() {
    assert_eq!(tile(256, 256, 256, 32).unwrap(), vec![(0, 0)]);
    let cols: Vec<usize> = tile(256, 1024, 256, 32).unwrap().iter().map(|o| o.1).collect();
    assert_eq!(cols, (0..=768).step_by(32).collect::<Vec<_>>());
    assert_eq!(cols.len(), 25);
    let rows: Vec<usize> = tile(300, 256, 256, 32).unwrap().iter().map(|o| o.0).collect();
    assert_eq!(rows, vec![0, 32, 44]);
    assert!(matches!(tile(100, 256, 256, 32), Err(InferenceError::TooSmall { .. })));
    assert!(matches!(tile(256, 256, 256, 0), Err(InferenceError::InvalidStride { .. })));
    assert!(matches!(tile(1024, 1024, 256, 257), Err(InferenceError::InvalidStride { stride: 257, patch: 256 })));
    assert_eq!(tile(256, 300, 256, 512).unwrap(), vec![(0, 0), (0, 44)]);
}

#[test]
fn tile_coverage_brute_force() {
    for (h, w, p, s) in [(1024, 1024, 256, 32), (300, 270, 64, 48), (64, 100, 64, 64)] {
        let mut cover = vec![0u32; h * w];
        for (r, c) in tile(h, w, p, s).unwrap() {
            assert!(r + p <= h && c + p <= w);
            for rr in r..r + p {
                for cc in c..c + p {
                    cover[rr * w + cc] += 1;
                }
            }
        }
        // coverage factorizes into independent row and column counts
        let along = |x: usize, extent: usize| {
            let mut origins: Vec<usize> = (0..=extent - p).filter(|o| o % s == 0).collect();
            if !origins.contains(&(extent - p)) {
                origins.push(extent - p);
            }
            origins.iter().filter(|&&o| o <= x && x < o + p).count() as u32
        };
        for r in 0..h {
            for c in 0..w {
                let want = along(r, h) * along(c, w);
                assert!(want >= 1);
                assert_eq!(cover[r * w + c], want, "{h}x{w} at ({r}, {c})");
            }
        }
    }
}

#[test]
fn vote_single_window_is_its_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = window(&mut rng, 5, 8);
    let mask = vote_fuse(8, 8, &[((0, 0), t.clone())]).unwrap();
    assert_eq!(mask.classes, argmax_window(&t));
}

#[test]
fn agreeing_windows_win_regardless_of_magnitude() {
    let mut a = Tensor::full(vec![5, 2, 2], 0.1f32);
    let mut b = Tensor::full(vec![5, 2, 2], 0.0f32);
    a.data_mut()[3 * 4] = 0.6;
    b.data_mut()[3 * 4] = 0.3;
    b.data_mut()[4] = 0.29;
    let mask = vote_fuse(2, 2, &[((0, 0), a), ((0, 0), b)]).unwrap();
    assert_eq!(mask.get(0, 0), 3);
}

#[test]
fn vote_matches_brute_force_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (h, w, p) = (12, 14, 8);
        let windows: Vec<_> = (0..3)
            .map(|_| ((rng.random_range(0..=h - p), rng.random_range(0..=w - p)), window(&mut rng, 5, p)))
            .collect();
        let mut grid = VoteGrid::new(5, h, w);
        for (o, t) in &windows {
            grid.add(*o, p, t.data()).unwrap();
        }
        match grid.finalize() {
            Ok(mask) => assert_eq!(mask.classes, brute_force(h, w, &windows)),
            Err(InferenceError::Uncovered { .. }) => {}
            Err(e) => panic!("{e}"),
        }
        // cover everything so the fixture always yields a mask
        let mut all = windows.clone();
        for o in tile(h, w, p, p).unwrap() {
            all.push((o, window(&mut rng, 5, p)));
        }
        assert_eq!(vote_fuse(h, w, &all).unwrap().classes, brute_force(h, w, &all));
    }
}

#[test]
fn vote_ties_and_errors() {
    let t = Tensor::full(vec![5, 2, 2], 0.2f32);
    assert!(vote_fuse(2, 2, &[((0, 0), t.clone())]).unwrap().classes.iter().all(|&c| c == 0));
    assert!(matches!(vote_fuse(3, 3, &[((2, 0), t.clone())]), Err(InferenceError::WindowOutOfBounds { .. })));
    assert!(matches!(vote_fuse(3, 3, &[((0, 0), t)]), Err(InferenceError::Uncovered { row: 0, col: 2 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn vote_is_permutation_and_scale_invariant(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, p) = (10, 10, 6);
        let mut windows: Vec<_> = tile(h, w, p, 2).unwrap().into_iter().map(|o| (o, window(&mut rng, 5, p))).collect();
        let base = vote_fuse(h, w, &windows).unwrap();
        let scaled: Vec<_> = windows
            .iter()
            .map(|(o, t)| (*o, Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * scale).collect()).unwrap()))
            .collect();
        prop_assert_eq!(&vote_fuse(h, w, &scaled).unwrap(), &base);
        windows.reverse();
        let n = windows.len();
        windows.swap(0, n / 2);
        prop_assert_eq!(&vote_fuse(h, w, &windows).unwrap(), &base);
    }
}

fn random_scene(h: u32, w: u32, seed: u64) -> ScenePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScenePair {
        scene_id: "s".into(),
        pre: RgbImage::from_fn(w, h, |_, _| Rgb(rng.random())),
        post: RgbImage::from_fn(w, h, |_, _| Rgb(rng.random())),
        labels: GrayImage::new(w, h),
    }
}

#[test]
fn patch_sized_scene_equals_single_forward() {
    let net = Network::new(small(Variant::SiamUnetAttnConc), 3).unwrap();
    let scene = random_scene(16, 16, 4);
    let out = predict_scene(&net, &scene, 32, 4).unwrap();
    let s = patchify(&scene, 16).unwrap().remove(0);
    let pred = net.predict(&s.pre, &s.post).unwrap();
    let damage = Tensor::new(vec![5, 16, 16], pred.damage.outer(0).to_vec()).unwrap();
    assert_eq!(out.damage.classes, argmax_window(&damage));
    let seg: Vec<bool> = pred.seg_post.data().iter().map(|&v| v >= 0.5).collect();
    assert_eq!(out.seg_post, seg);
}

#[test]
fn stride_equal_to_patch_is_stitched_per_patch_prediction() {
    let net = Network::new(small(Variant::FcSiamDiff), 5).unwrap();
    let scene = random_scene(32, 48, 6);
    for batch in [1, 4] {
        let out = predict_scene(&net, &scene, 16, batch).unwrap();
        for s in patchify(&scene, 16).unwrap() {
            let pred = net.predict(&s.pre, &s.post).unwrap();
            let damage = Tensor::new(vec![5, 16, 16], pred.damage.outer(0).to_vec()).unwrap();
            let local = argmax_window(&damage);
            for r in 0..16 {
                for c in 0..16 {
                    let (gr, gc) = (s.provenance.row * 16 + r, s.provenance.col * 16 + c);
                    assert_eq!(out.damage.get(gr, gc), local[r * 16 + c]);
                }
            }
        }
    }
}

#[test]
fn scene_prediction_is_deterministic_and_sized() {
    let net = Network::new(small(Variant::SiamUnetAttnDiff), 7).unwrap();
    let scene = synth_generate(1, 64, 1).unwrap().remove(0);
    let a = predict_scene(&net, &scene, 4, 8).unwrap();
    let b = predict_scene(&net, &scene, 4, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.damage.height, a.damage.width, a.seg_pre.len()), (64, 64, 64 * 64));
    let tiny = random_scene(8, 8, 0);
    assert!(matches!(predict_scene(&net, &tiny, 4, 1), Err(InferenceError::TooSmall { .. })));
}

#[test]
fn constant_scene_interior_repeats_with_the_stride() {
    let net = Network::new(small(Variant::FcSiamConc), 9).unwrap();
    let scene = ScenePair {
        scene_id: "flat".into(),
        pre: RgbImage::from_pixel(64, 64, Rgb([90, 120, 60])),
        post: RgbImage::from_pixel(64, 64, Rgb([90, 120, 60])),
        labels: GrayImage::from_pixel(64, 64, Luma([0])),
    };
    let stride = 4;
    let out = predict_scene(&net, &scene, stride, 4).unwrap();
    // away from the borders a pixel sees every window offset congruent to it
    let (lo, hi) = (16 - stride, 64 - 16);
    for r in lo..hi - stride {
        for c in lo..hi - stride {
            assert_eq!(out.damage.get(r, c), out.damage.get(r + stride, c), "({r}, {c})");
            assert_eq!(out.damage.get(r, c), out.damage.get(r, c + stride), "({r}, {c})");
        }
    }
}

fn sample_for(net: &Network, seed: u64) -> suna_core::datapipe::SamplePair {
    let size = net.config().input_size as u32;
    patchify(&random_scene(size, size, seed), size as usize).unwrap().remove(0)
}

#[test]
fn uniform_attention_gives_flat_heat() {
    let mut net = Network::new(small(Variant::SiamUnetAttnDiff), 1).unwrap();
    for name in ["attention.w_f", "attention.w_g"] {
        net.param_mut(name).unwrap().data_mut().fill(0.0);
    }
    let heat = export_attention(&net, &sample_for(&net, 2), (5, 7)).unwrap();
    assert!(heat.values.iter().all(|&v| v == 0.0));
    assert!(heat.row.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-7));
}

#[test]
fn heat_follows_floor_mapping_and_normalizes() {
    let net = Network::new(small(Variant::SiamUnetAttnConc), 2).unwrap();
    let sample = sample_for(&net, 3);
    let a = export_attention(&net, &sample, (4, 4)).unwrap();
    let b = export_attention(&net, &sample, (7, 5)).unwrap();
    assert_eq!(a.cell, (1, 1));
    assert_eq!(a, b);
    let c = export_attention(&net, &sample, (8, 4)).unwrap();
    assert_eq!(c.cell, (2, 1));
    let (lo, hi) = a.values.iter().fold((1f32, 0f32), |(l, h), &v| (l.min(v), h.max(v)));
    assert_eq!((lo, hi), (0.0, 1.0));
    assert!((a.row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
}

#[test]
fn attention_export_errors() {
    let net = Network::new(small(Variant::FcSiamDiff), 1).unwrap();
    assert!(matches!(export_attention(&net, &sample_for(&net, 1), (0, 0)), Err(InferenceError::NoAttention(_))));
    let net = Network::new(small(Variant::SiamUnetAttnDiff), 1).unwrap();
    assert!(matches!(
        export_attention(&net, &sample_for(&net, 1), (16, 0)),
        Err(InferenceError::QueryOutOfBounds { .. })
    ));
}

#[test]
fn rendering_and_files() {
    let mask = MaskRaster {
        height: 1,
        width: 5,
        classes: vec![0, 1, 2, 3, 4],
    };
    let rgba = mask.to_rgba();
    assert_eq!(rgba.get_pixel(0, 0)[3], 0);
    for c in 1..5u32 {
        assert_eq!(rgba.get_pixel(c, 0).0, PALETTE[c as usize - 1]);
    }
    assert_eq!(mask.to_gray().as_raw(), &mask.classes);

    let dir = tempfile::tempdir().unwrap();
    let net = Network::new(small(Variant::SiamUnetAttnConc), 1).unwrap();
    let out = predict_scene(&net, &random_scene(32, 32, 1), 16, 2).unwrap();
    write_scene_outputs(dir.path(), &out).unwrap();
    let damage = image::open(dir.path().join("damage.png")).unwrap().to_luma8();
    assert_eq!(damage.as_raw(), &out.damage.classes);
    let seg = image::open(dir.path().join("seg_post.png")).unwrap().to_luma8();
    assert!(seg.as_raw().iter().all(|&v| v == 0 || v == 255));
    let heat = export_attention(&net, &sample_for(&net, 1), (3, 3)).unwrap();
    write_heat_png(&dir.path().join("attention.png"), &heat).unwrap();
    let png = image::open(dir.path().join("attention.png")).unwrap().to_luma8();
    assert_eq!(png.dimensions(), (16, 16));
    assert!(png.as_raw().contains(&255));
}
