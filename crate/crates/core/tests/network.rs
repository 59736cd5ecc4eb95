use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use suna_core::network::{Checkpoint, CheckpointError, Differencing, Network, NetworkConfig, NetworkError, Variant};
use suna_core::{Graph, Mode, Tensor};

fn small(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        input_size: 16,
        channel_widths: vec![4, 8, 8],
        attention_resolution: 4,
        ..NetworkConfig::desk(variant)
    }
}

fn image(rng: &mut ChaCha8Rng, batch: usize, size: usize) -> Tensor {
    Tensor::from_fn(vec![batch, 3, size, size], |_| rng.random_range(0.0..1.0))
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn outputs_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in Variant::ALL {
        let net = Network::new(small(v), 7).unwrap();
        let (a, b) = (image(&mut rng, 2, 16), image(&mut rng, 2, 16));
        let p = net.predict(&a, &b).unwrap();
        let plane = 16 * 16;
        for n in 0..2 {
            for px in 0..plane {
                let s: f32 = (0..5).map(|c| p.damage.data()[(n * 5 + c) * plane + px]).sum();
                assert!((s - 1.0).abs() < 1e-5, "{v}");
            }
        }
        assert!(p.seg_pre.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        if let Some(att) = &p.attention {
            assert_eq!(att.shape(), &[2, 16, 16]);
        }
    }
}

#[test]
fn default_attention_grid_has_1024_positions() {
    let cfg = NetworkConfig::default();
    let level = cfg.attention_level().unwrap();
    let side = cfg.resolution(level);
    assert_eq!(side * side, 1024);
    assert_eq!(cfg.resolution(cfg.depth), 1);
}

#[test]
fn diff_fusion_is_symmetric_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in [Variant::SiamUnetAttnDiff, Variant::FcSiamDiff] {
        let mut net = Network::new(small(v), 3).unwrap();
        if let Some(g) = net.param_mut("attention.gamma") {
            g.data_mut()[0] = 0.5;
        }
        for _ in 0..5 {
            let (a, b) = (image(&mut rng, 1, 16), image(&mut rng, 1, 16));
            let ab = net.predict(&a, &b).unwrap();
            let ba = net.predict(&b, &a).unwrap();
            assert_eq!(bits(&ab.damage), bits(&ba.damage), "{v}");
        }
    }
}

#[test]
fn signed_differencing_breaks_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = small(Variant::FcSiamDiff);
    cfg.differencing = Differencing::Signed;
    let net = Network::new(cfg, 3).unwrap();
    let (a, b) = (image(&mut rng, 1, 16), image(&mut rng, 1, 16));
    assert_ne!(net.predict(&a, &b).unwrap().damage, net.predict(&b, &a).unwrap().damage);
}

#[test]
fn identical_frames_give_zero_diff_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::new(small(Variant::SiamUnetAttnDiff), 3).unwrap();
    let a = image(&mut rng, 2, 16);
    let mut g = Graph::new();
    let xa = g.constant(a.clone()).unwrap();
    let xb = g.constant(a).unwrap();
    let out = net.forward_graph(&mut g, xa, xb, Mode::Eval).unwrap();
    assert_eq!(out.fused.len(), 4);
    for f in out.fused {
        assert!(g.value(f).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn encoder_weights_are_shared_between_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = Network::new(small(Variant::SiamUnetAttnConc), 3).unwrap();
    let (a, b) = (image(&mut rng, 2, 16), image(&mut rng, 2, 16));

    // one trainable leaf per named parameter, however often it is used
    let total_grad = |net: &mut Network, a: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let xa = g.constant(a.clone()).unwrap();
        let xb = g.constant(b.clone()).unwrap();
        let out = net.forward_graph(&mut g, xa, xb, Mode::Train).unwrap();
        assert_eq!(g.bound_params().count(), net.params().len());
        let loss = g.sum(out.damage).unwrap();
        let seg = g.sum(out.seg_pre.unwrap()).unwrap();
        let loss = g.add(loss, seg).unwrap();
        g.backward(loss).unwrap();
        net.clear_grads();
        net.absorb_grads(&g).unwrap();
        net.param("encoder.0.conv.weight").unwrap().grad().unwrap().to_vec()
    };
    let both = total_grad(&mut net, &a, &b);
    assert!(both.iter().any(|&x| x != 0.0));
    assert!(!net.params().iter().any(|p| p.name.contains("encoder_b")));
}

#[test]
fn train_mode_updates_running_stats_and_eval_does_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Network::new(small(Variant::FcSiamConc), 3).unwrap();
    let before = net.stats().to_vec();
    let (a, b) = (image(&mut rng, 2, 16), image(&mut rng, 2, 16));
    net.forward(&a, &b, Mode::Eval).unwrap();
    assert_eq!(net.stats(), &before[..]);
    net.forward(&a, &b, Mode::Train).unwrap();
    assert_ne!(net.stats(), &before[..]);
}

#[test]
fn every_trainable_parameter_receives_a_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for v in Variant::ALL {
        let mut net = Network::new(small(v), 3).unwrap();
        let (a, b) = (image(&mut rng, 2, 16), image(&mut rng, 2, 16));
        let mut g = Graph::new();
        let xa = g.constant(a).unwrap();
        let xb = g.constant(b).unwrap();
        let out = net.forward_graph(&mut g, xa, xb, Mode::Train).unwrap();
        let r = Tensor::from_fn(g.shape(out.damage).to_vec(), |_| rng.random_range(-1.0..1.0));
        let r = g.constant(r).unwrap();
        let mut loss = g.mul(out.damage, r).unwrap();
        loss = g.sum(loss).unwrap();
        for s in [out.seg_pre, out.seg_post].into_iter().flatten() {
            let t = g.mean(s).unwrap();
            loss = g.add(loss, t).unwrap();
        }
        g.backward(loss).unwrap();
        net.absorb_grads(&g).unwrap();
        for p in net.params() {
            let grad = p.tensor.grad().unwrap();
            assert!(grad.iter().all(|x| x.is_finite()), "{v} {}", p.name);
            // query/key projections only move once γ ≠ 0
            if !p.name.starts_with("attention.w_") {
                assert!(grad.iter().any(|&x| x != 0.0), "{v} {} has zero gradient", p.name);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let mut net = Network::new(small(v), 11).unwrap();
        let (a, b) = (image(&mut rng, 2, 16), image(&mut rng, 2, 16));
        net.forward(&a, &b, Mode::Train).unwrap();
        let path = dir.path().join(format!("{v}.ckpt"));
        let mut ckpt = net.to_checkpoint();
        ckpt.set_meta("epoch", 4);
        ckpt.write(&path).unwrap();
        let back = Network::from_checkpoint(&Checkpoint::read(&path).unwrap()).unwrap();
        assert_eq!(back.config(), net.config());
        let p0 = net.predict(&a, &b).unwrap();
        let p1 = back.predict(&a, &b).unwrap();
        assert_eq!(bits(&p0.damage), bits(&p1.damage));
        assert_eq!(bits(&p0.seg_post), bits(&p1.seg_post));
    }
}

#[test]
fn checkpoint_mismatches_are_rejected() {
    let net = Network::new(small(Variant::FcSiamDiff), 1).unwrap();
    let mut missing = net.to_checkpoint();
    missing.tensors.retain(|(n, _)| n != "damage_head.bias");
    assert!(matches!(
        Network::from_checkpoint(&missing),
        Err(NetworkError::Checkpoint(CheckpointError::MissingTensor(n))) if n == "damage_head.bias"
    ));

    let mut reshaped = net.to_checkpoint();
    reshaped.tensors[0].1 = Tensor::zeros(vec![1]);
    assert!(matches!(
        Network::from_checkpoint(&reshaped),
        Err(NetworkError::Checkpoint(CheckpointError::ShapeMismatch { .. }))
    ));

    let mut extra = net.to_checkpoint();
    extra.tensors.push(("decoder.9.weight".into(), Tensor::zeros(vec![1])));
    assert!(matches!(
        Network::from_checkpoint(&extra),
        Err(NetworkError::Checkpoint(CheckpointError::UnexpectedTensor(_)))
    ));

    let mut optim = net.to_checkpoint();
    optim.push_optimizer_tensor("m.encoder.0.conv.weight", Tensor::zeros(vec![1]));
    assert!(Network::from_checkpoint(&optim).is_ok());
}

#[test]
fn same_seed_same_network() {
    let a = Network::new(small(Variant::SiamUnetAttnConc), 42).unwrap();
    let b = Network::new(small(Variant::SiamUnetAttnConc), 42).unwrap();
    let c = Network::new(small(Variant::SiamUnetAttnConc), 43).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}
