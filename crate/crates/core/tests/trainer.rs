use suna_core::datapipe::{synth_generate, Batch, PatchDataset};
use suna_core::network::{NamedParam, NetworkConfig, Variant};
use suna_core::trainer::{adam_step, AdamConfig, OptimizerState, TrainConfig, TrainData, TrainError, Trainer};
use suna_core::Tensor;

fn tiny(variant: Variant) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig {
            depth: 3,
            input_size: 16,
            channel_widths: vec![4, 8, 8],
            attention_resolution: 4,
            ..NetworkConfig::desk(variant)
        },
        epochs: 3,
        batch_size: 4,
        eval_batch_size: 4,
        ..TrainConfig::desk(variant)
    }
}

fn dataset() -> PatchDataset {
    PatchDataset::new(synth_generate(1, 64, 3).unwrap(), 16).unwrap()
}

#[test]
fn adam_shrinks_a_quadratic() {
    let mut params = vec![NamedParam {
        name: "w".into(),
        tensor: Tensor::scalar(1.0f32).with_grad(),
    }];
    let mut state = OptimizerState::new(&params);
    let mut last = 1.0f32;
    for _ in 0..10 {
        let w = params[0].tensor.data()[0];
        params[0].tensor.set_grad(vec![2.0 * w]).unwrap();
        adam_step(&mut params, &mut state, 0.05, &AdamConfig::default()).unwrap();
        let now = params[0].tensor.data()[0].abs();
        assert!(now < last, "{now} !< {last}");
        last = now;
    }
    assert_eq!(state.step, 10);
}

#[test]
fn small_step_decreases_frozen_batch_loss() {
    let ds = dataset();
    for variant in [Variant::SiamUnetAttnConc, Variant::FcEf] {
        let mut t = Trainer::new(tiny(variant)).unwrap();
        let batch = Batch::collate(&(0..4).map(|i| ds.sample(i)).collect::<Vec<_>>());
        let before = t.step(&batch, 1e-5, 0, 0).unwrap();
        let after = t.batch_loss(&batch).unwrap();
        assert!(after < before, "{variant}: {after} !< {before}");
    }
}

#[test]
fn one_epoch_on_two_samples() {
    let ds = dataset();
    let mut t = Trainer::new(TrainConfig { epochs: 1, ..tiny(Variant::SiamUnetAttnDiff) }).unwrap();
    t.fit(TrainData { dataset: &ds, train: &[0, 1], val: &[2] }, None).unwrap();
    let h = t.history();
    assert_eq!(h.len(), 1);
    assert!(h[0].train_loss.is_finite() && h[0].train_loss > 0.0);
    assert!(t.is_finished());
    assert!(matches!(
        t.run_epoch(TrainData { dataset: &ds, train: &[], val: &[] }),
        Err(TrainError::EmptyTrainSplit)
    ));
}

#[test]
fn same_seed_same_run() {
    let ds = dataset();
    let train: Vec<usize> = (0..10).collect();
    let run = || {
        let mut t = Trainer::new(tiny(Variant::FcSiamConc)).unwrap();
        t.fit_until(TrainData { dataset: &ds, train: &train, val: &[12, 13] }, None, 2, |_| {}).unwrap();
        (t.history().to_vec(), t.checkpoint().encode())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let ds = dataset();
    let train: Vec<usize> = (0..10).collect();
    let data = TrainData { dataset: &ds, train: &train, val: &[12, 13] };
    let cfg = tiny(Variant::SiamUnetAttnConc);

    let mut full = Trainer::new(cfg.clone()).unwrap();
    full.fit(data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.fit_until(data, Some(dir.path()), 1, |_| {}).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(cfg, dir.path()).unwrap();
    assert_eq!(resumed.next_epoch(), 1);
    assert_eq!(resumed.optimizer().step, 3);
    resumed.fit(data, Some(dir.path())).unwrap();

    assert_eq!(resumed.history(), full.history());
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn non_finite_weights_abort_with_location() {
    let ds = dataset();
    let mut t = Trainer::new(tiny(Variant::SiamUnetAttnDiff)).unwrap();
    t.network_mut().param_mut("encoder.0.conv.weight").unwrap().data_mut()[0] = f32::NAN;
    let batch = Batch::collate(&[ds.sample(0), ds.sample(1)]);
    match t.step(&batch, 1e-3, 4, 7) {
        Err(TrainError::NonFinite { epoch, batch, term }) => {
            assert_eq!((epoch, batch), (4, 7));
            assert!(!term.is_empty());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn config_keys() {
    let mut cfg = tiny(Variant::FcEf);
    assert!(cfg.set("epochs", "0").unwrap());
    assert!(cfg.validate().is_err());
    assert!(cfg.set("lr", "fast").is_err());
    assert!(!cfg.set("no_such_key", "1").unwrap());
    let mut cfg = tiny(Variant::FcEf);
    for (k, v) in tiny(Variant::SiamUnetAttnDiff).to_kv() {
        assert!(cfg.set(&k, &v).unwrap(), "{k}");
    }
    assert_eq!(cfg.to_kv(), tiny(Variant::SiamUnetAttnDiff).to_kv());
}
