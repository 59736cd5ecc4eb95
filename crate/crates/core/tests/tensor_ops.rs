use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use suna_core::tensor::{
    grad_check, BatchNormOptions, Graph, Mode, Result, RunningStats, Tensor, TensorError, Var,
};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 3] = [11, 23, 47];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Scalar probe `Σ y ⊙ r` with a fixed random `r`, so every output element
/// contributes a distinct weight to the checked gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(g.shape(y), &mut rng);
    let r = g.constant(r)?;
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn assert_grad_ok(report: suna_core::tensor::GradCheckReport, what: &str) {
    assert!(
        report.passed(),
        "{what}: max relative error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn conv_pointwise_identity_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f32> = Tensor::from_fn(vec![2, 3, 5, 4], |_| rng.random_range(-10.0..10.0));
    let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w).unwrap());
    let b = g.constant(Tensor::zeros(vec![3])).unwrap();
    let y = g.conv2d(xv, wv, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_all_ones_kernel_sums_neighbourhood() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
    let w = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(vec![1, 2, 4, 4])).unwrap();
    let w = g.constant(Tensor::ones(vec![1, 3, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(TensorError::ShapeMismatch { .. })));
    let w = g.constant(Tensor::ones(vec![1, 2, 3, 3])).unwrap();
    assert!(matches!(
        g.conv2d(x, w, None, 2, 0),
        Err(TensorError::NonIntegralExtent { .. })
    ));
    let w5 = g.constant(Tensor::ones(vec![1, 2, 5, 5])).unwrap();
    assert!(g.conv2d(x, w5, None, 1, 2).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&[2, 3, 8, 8], &mut rng),
            random(&[4, 3, 3, 3], &mut rng),
            random(&[4], &mut rng),
        ];
        let report = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                probe(g, y, seed)
            },
            &inputs,
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "conv2d 3x3");

        let inputs = [random(&[1, 2, 7, 7], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
        let report = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 0)?;
                probe(g, y, seed)
            },
            &inputs,
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "conv2d stride 2");

        let inputs = [random(&[2, 5, 3, 3], &mut rng), random(&[2, 5, 1, 1], &mut rng)];
        let report = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 1, 0)?;
                probe(g, y, seed)
            },
            &inputs,
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "conv2d 1x1");
    }
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f32>::new();
    let x = g
        .leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad())
        .unwrap();
    let y = g.max_pool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.constant(Tensor::full(vec![2, 3, 4, 6], 2.5)).unwrap();
    let y = g.max_pool2d(c).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 2, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));

    let odd = g.constant(Tensor::zeros(vec![1, 1, 3, 4])).unwrap();
    assert!(matches!(g.max_pool2d(odd), Err(TensorError::OddExtent { .. })));
}

#[test]
fn maxpool_tie_routes_to_first_occurrence() {
    let mut g = Graph::<f32>::new();
    let x = g
        .leaf(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap().with_grad())
        .unwrap();
    let y = g.max_pool2d(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = grad_check(
            |g, v| {
                let y = g.max_pool2d(v[0])?;
                probe(g, y, seed)
            },
            &[random(&[2, 3, 6, 4], &mut rng)],
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "max_pool2d");
    }
}

#[test]
fn upsample_preserves_constants() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::full(vec![1, 2, 3, 5], -1.25)).unwrap();
    let y = g.upsample_bilinear(c, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 6, 10]);
    assert!(g.value(y).data().iter().all(|&v| v == -1.25));

    let single = g.constant(Tensor::full(vec![1, 1, 1, 1], 7.0)).unwrap();
    let y = g.upsample_bilinear(single, 2).unwrap();
    assert_eq!(g.value(y).data(), &[7.0; 4]);

    assert!(g.upsample_bilinear(single, 3).is_err());
}

#[test]
fn upsample_interpolates_with_half_pixel_centres() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap()).unwrap();
    let y = g.upsample_bilinear(x, 2).unwrap();
    // columns sample at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
}

#[test]
fn upsample_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = grad_check(
            |g, v| {
                let y = g.upsample_bilinear(v[0], 2)?;
                probe(g, y, seed)
            },
            &[random(&[1, 4, 4], &mut rng)],
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "upsample_bilinear");
    }
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = random(&[2, 3, 4, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let s = g.constant(Tensor::ones(vec![3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![3])).unwrap();
    let mut stats = RunningStats::new(3);
    let y = g
        .batch_norm(xv, s, b, &mut stats, Mode::Eval, BatchNormOptions::default())
        .unwrap();
    for (a, e) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0));
    }
    assert_eq!(stats, RunningStats::new(3));
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::from_fn(vec![3, 2, 5, 5], |_| rng.random_range(-3.0..7.0));
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let s = g.constant(Tensor::ones(vec![2])).unwrap();
    let b = g.constant(Tensor::zeros(vec![2])).unwrap();
    let mut stats = RunningStats::new(2);
    let y = g
        .batch_norm(xv, s, b, &mut stats, Mode::Train, BatchNormOptions::default())
        .unwrap();
    let y = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| y[(n * 2 + ch) * 25..(n * 2 + ch + 1) * 25].iter().copied())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    // running estimates moved by momentum 0.1 towards the batch statistics
    assert!(stats.mean.data().iter().all(|&m| m > 0.0));
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for seed in SEEDS {
        for mode in [Mode::Train, Mode::Eval] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = [
                random(&[2, 3, 4, 4], &mut rng),
                Tensor::from_fn(vec![3], |_| rng.random_range(0.5..1.5)),
                random(&[3], &mut rng),
            ];
            let report = grad_check(
                |g, v| {
                    let mut stats = RunningStats::new(3);
                    stats.var = Tensor::full(vec![3], 0.7);
                    let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, BatchNormOptions::default())?;
                    probe(g, y, seed)
                },
                &inputs,
                STEP,
                TOL,
            )
            .unwrap();
            assert_grad_ok(report, &format!("batch_norm {mode:?}"));
        }
    }
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let z = g.constant(Tensor::zeros(vec![2])).unwrap();
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let big = g.constant(Tensor::full(vec![3], 1000.0)).unwrap();
    let s = g.softmax(big, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    let zero = g.constant(Tensor::zeros(vec![1])).unwrap();
    let sg = g.sigmoid(zero).unwrap();
    assert_eq!(g.value(sg).data(), &[0.5]);
}

#[test]
fn activation_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, axis) in [("relu", 0), ("sigmoid", 0), ("softmax1", 1), ("softmax2", 2)] {
            let report = grad_check(
                |g, v| {
                    let y = match name {
                        "relu" => g.relu(v[0])?,
                        "sigmoid" => g.sigmoid(v[0])?,
                        _ => g.softmax(v[0], axis)?,
                    };
                    probe(g, y, seed)
                },
                &[random(&[2, 5, 3], &mut rng)],
                STEP,
                TOL,
            )
            .unwrap();
            assert_grad_ok(report, name);
        }
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap()).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[17.0, 39.0]);

    let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let c = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let ta = g.matmul_t(a, b, true, false).unwrap();
    assert_eq!(g.value(ta).data(), &[23.0, 34.0]);

    assert!(matches!(g.matmul(b, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe(g, y, seed)
            },
            &[random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "matmul");

        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let report = grad_check(
                |g, v| {
                    let y = g.matmul_t(v[0], v[1], ta, tb)?;
                    probe(g, y, seed)
                },
                &[random(&sa, &mut rng), random(&sb, &mut rng)],
                STEP,
                TOL,
            )
            .unwrap();
            assert_grad_ok(report, &format!("batched matmul ta={ta} tb={tb}"));
        }
    }
}

#[test]
fn combine_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 2, 4, 4], &mut rng)).unwrap();
    let d = g.abs_diff(x, x).unwrap();
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));

    let o = g.constant(random(&[1, 2, 4, 4], &mut rng)).unwrap();
    let gamma = g.constant(Tensor::scalar(0.0)).unwrap();
    let y = g.add_scaled(o, x, gamma).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let a = g.constant(random(&[1, 2, 4, 4], &mut rng)).unwrap();
    let b = g.constant(random(&[1, 3, 4, 4], &mut rng)).unwrap();
    let c = g.concat_channels(a, b).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 4, 4]);
    assert_eq!(&g.value(c).data()[..32], g.value(a).data());
    assert_eq!(&g.value(c).data()[32..], g.value(b).data());

    assert!(g.abs_diff(a, b).is_err());
    let small = g.constant(random(&[1, 2, 2, 2], &mut rng)).unwrap();
    assert!(g.concat_channels(a, small).is_err());
    let two = g.constant(Tensor::zeros(vec![2])).unwrap();
    assert!(g.add_scaled(o, x, two).is_err());
}

#[test]
fn combine_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&[2, 2, 3, 3], &mut rng),
            random(&[2, 3, 3, 3], &mut rng),
            random(&[2, 2, 3, 3], &mut rng),
            random(&[1], &mut rng),
        ];
        let report = grad_check(
            |g, v| {
                let c = g.concat_channels(v[0], v[1])?;
                let d = g.abs_diff(v[0], v[2])?;
                let s = g.add_scaled(d, v[2], v[3])?;
                let (pc, ps) = (probe(g, c, seed)?, probe(g, s, seed + 1)?);
                g.add(pc, ps)
            },
            &inputs,
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "concat/abs_diff/add_scaled");
    }
}

#[test]
fn batch_concat_and_slice_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::<f64>::new();
    let a = g.constant(random(&[2, 3, 2, 2], &mut rng)).unwrap();
    let b = g.constant(random(&[1, 3, 2, 2], &mut rng)).unwrap();
    let c = g.concat_batch(a, b).unwrap();
    assert_eq!(g.shape(c), &[3, 3, 2, 2]);
    let head = g.batch_slice(c, 0, 2).unwrap();
    let tail = g.batch_slice(c, 2, 1).unwrap();
    assert_eq!(g.value(head).data(), g.value(a).data());
    assert_eq!(g.value(tail).data(), g.value(b).data());

    let wide = g.constant(random(&[1, 4, 2, 2], &mut rng)).unwrap();
    assert!(g.concat_batch(a, wide).is_err());
    assert!(g.batch_slice(c, 2, 2).is_err());
    assert!(g.batch_slice(c, 0, 0).is_err());
}

#[test]
fn batch_concat_and_slice_gradients_match_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = grad_check(
            |g, v| {
                let c = g.concat_batch(v[0], v[1])?;
                let mid = g.batch_slice(c, 1, 2)?;
                probe(g, mid, seed)
            },
            &[random(&[2, 2, 3, 3], &mut rng), random(&[2, 2, 3, 3], &mut rng)],
            STEP,
            TOL,
        )
        .unwrap();
        assert_grad_ok(report, "concat_batch/batch_slice");
    }
}

#[test]
fn backward_of_simple_reductions() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap().with_grad())
        .unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn backward_error_paths() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::ones(vec![3]).with_grad()).unwrap();
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));

    let c = g.constant(Tensor::ones(vec![3])).unwrap();
    let s = g.sum(c).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::Detached)));

    let mut other = Graph::<f32>::new();
    let o = other.leaf(Tensor::ones(vec![1]).with_grad()).unwrap();
    assert!(matches!(g.backward(o), Err(TensorError::ForeignVar)));
    assert!(g.relu(o).is_err());
}

#[test]
fn unused_trainable_leaf_gets_zero_grad() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::ones(vec![2]).with_grad()).unwrap();
    let unused = g.leaf(Tensor::ones(vec![3]).with_grad()).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![2], f32::MAX)).unwrap();
    assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { op: "add" })));
}

#[test]
fn param_binding_is_shared() {
    let mut g = Graph::<f32>::new();
    let w = Tensor::ones(vec![2]).with_grad();
    let a = g.param(7, &w).unwrap();
    let b = g.param(7, &w).unwrap();
    assert_eq!(a, b);
    let s1 = g.sum(a).unwrap();
    let s2 = g.sum(b).unwrap();
    let s = g.add(s1, s2).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn(vec![3, 4, 8, 8], |_| rng.random_range(-1.0..1.0)).with_grad()).unwrap();
        let w = g.leaf(Tensor::from_fn(vec![6, 4, 3, 3], |_| rng.random_range(-1.0..1.0)).with_grad()).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let p = g.max_pool2d(y).unwrap();
        let u = g.upsample_bilinear(p, 2).unwrap();
        let s = g.softmax(u, 1).unwrap();
        let sq = g.mul(s, u).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        logits in proptest::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..3,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 3, 2], logits).unwrap()).unwrap();
        let y = g.softmax(x, axis).unwrap();
        let shape = [2usize, 3, 2];
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let y = g.value(y).data();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..len).map(|j| y[(o * len + j) * inner + i]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
            }
        }
        prop_assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pointwise_identity_conv_preserves_bits(values in proptest::collection::vec(-1e6f32..1e6, 2 * 3 * 3)) {
        let mut g = Graph::<f32>::new();
        let x = Tensor::new(vec![1, 2, 3, 3], values).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let w = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let y = g.conv2d(xv, w, None, 1, 0).unwrap();
        let same = g.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
