use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::TrainError;
use crate::datapipe::{augment, AugmentConfig, Batch, PatchDataset};
use crate::network::{Checkpoint, Network, NetworkConfig, NetworkError, Prediction, Variant};
use crate::objectives::{
    damage_loss_indices, seg_loss, ClassWeights, ConfusionCounts, MetricReport, DEFAULT_DELTA, DEFAULT_EPSILON,
};
use crate::tensor::{Graph, Mode, TensorError};

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_f1_damage,val_f1_seg";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    /// Drives initialization, data order and augmentation.
    pub seed: u64,
    /// Write `latest.ckpt` every this many epochs (and after the last).
    pub checkpoint_every: usize,
    pub weights: ClassWeights,
    pub loss_delta: f64,
    pub f1_epsilon: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            epochs: 100,
            lr0: 1e-3,
            batch_size: 8,
            eval_batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 1,
            weights: ClassWeights::default(),
            loss_delta: DEFAULT_DELTA,
            f1_epsilon: DEFAULT_EPSILON,
            augment: AugmentConfig::default(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Desk-scale preset: 64-pixel patches, batch 32, 30 epochs.
    pub fn desk(variant: Variant) -> Self {
        Self {
            network: NetworkConfig::desk(variant),
            epochs: 30,
            batch_size: 32,
            eval_batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        self.weights.validate()?;
        self.network.validate()?;
        if self.weights.damage.len() != self.network.num_damage_classes {
            return bad("damage weights must match num_damage_classes");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = self.network.to_kv();
        let a = &self.augment;
        kv.extend(
            [
                ("epochs", self.epochs.to_string()),
                ("lr", self.lr0.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("eval_batch_size", self.eval_batch_size.to_string()),
                ("seed", self.seed.to_string()),
                ("checkpoint_every", self.checkpoint_every.to_string()),
                ("adam_beta1", self.adam.beta1.to_string()),
                ("adam_beta2", self.adam.beta2.to_string()),
                ("adam_epsilon", self.adam.epsilon.to_string()),
                ("seg_weights", join(&self.weights.seg)),
                ("damage_weights", join(&self.weights.damage)),
                ("loss_delta", self.loss_delta.to_string()),
                ("f1_epsilon", self.f1_epsilon.to_string()),
                ("augment_flips", a.flips.to_string()),
                ("brightness", join(&[a.brightness.0, a.brightness.1])),
                ("contrast", join(&[a.contrast.0, a.contrast.1])),
                ("min_crop", a.min_crop.to_string()),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        kv
    }

    /// Applies one setting; `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        if self.network.set(key, value)? {
            return Ok(true);
        }
        let v = value.trim();
        let err = || TrainError::Config(format!("{key}: invalid value '{value}'"));
        let int = || v.parse::<usize>().map_err(|_| err());
        let real = || v.parse::<f64>().map_err(|_| err());
        let reals = || v.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| err())).collect::<Result<Vec<_>, _>>();
        let pair = || -> Result<(f32, f32), TrainError> {
            match reals()?[..] {
                [a, b] => Ok((a as f32, b as f32)),
                _ => Err(err()),
            }
        };
        match key {
            "epochs" => self.epochs = int()?,
            "lr" => self.lr0 = real()?,
            "batch_size" => self.batch_size = int()?,
            "eval_batch_size" => self.eval_batch_size = int()?,
            "seed" => self.seed = v.parse().map_err(|_| err())?,
            "checkpoint_every" => self.checkpoint_every = int()?,
            "adam_beta1" => self.adam.beta1 = real()?,
            "adam_beta2" => self.adam.beta2 = real()?,
            "adam_epsilon" => self.adam.epsilon = real()?,
            "seg_weights" => {
                self.weights.seg = reals()?.try_into().map_err(|_| err())?;
            }
            "damage_weights" => self.weights.damage = reals()?,
            "loss_delta" => self.loss_delta = real()?,
            "f1_epsilon" => self.f1_epsilon = real()?,
            "augment_flips" => self.augment.flips = v.parse().map_err(|_| err())?,
            "brightness" => self.augment.brightness = pair()?,
            "contrast" => self.augment.contrast = pair()?,
            "min_crop" => self.augment.min_crop = real()? as f32,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `lr0 · (1 − e/(epochs−1))`, or `lr0` for a single epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if epoch >= config.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    if config.epochs == 1 {
        return Ok(config.lr0);
    }
    Ok(config.lr0 * (1.0 - epoch as f64 / (config.epochs - 1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1_damage: Option<f64>,
    /// Building F1 of the damage mask (any damage class vs background).
    pub val_f1_seg: Option<f64>,
}

impl EpochRecord {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_f1_damage),
            opt(self.val_f1_seg)
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        let opt = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(Self {
            epoch: f[0].parse().ok()?,
            lr: f[1].parse().ok()?,
            train_loss: f[2].parse().ok()?,
            val_f1_damage: opt(f[3])?,
            val_f1_seg: opt(f[4])?,
        })
    }
}

/// Patch dataset with train and validation index lists.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a PatchDataset,
    pub train: &'a [usize],
    pub val: &'a [usize],
}

/// Pixel-level confusion counts of `net` over `indices`.
pub fn evaluate(
    net: &Network,
    dataset: &PatchDataset,
    indices: &[usize],
    batch_size: usize,
    epsilon: f64,
) -> Result<MetricReport, TrainError> {
    let classes = net.config().num_damage_classes;
    let seg_head = net.variant().is_siam_unet_attn();
    let parts = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<ConfusionCounts, TrainError> {
            let samples: Vec<_> = chunk.iter().map(|&i| dataset.sample(i)).collect();
            let batch = Batch::collate(&samples);
            let pred = net.predict(&batch.pre, &batch.post)?;
            let mut counts = ConfusionCounts::new(classes);
            counts.accumulate(&argmax_classes(&pred), &batch.damage, &batch.building)?;
            if seg_head {
                let pre_truth: Vec<bool> = batch.seg_pre.iter().map(|&v| v > 0.5).collect();
                let pre: Vec<bool> = pred.seg_pre.data().iter().map(|&v| v >= 0.5).collect();
                let post: Vec<bool> = pred.seg_post.data().iter().map(|&v| v >= 0.5).collect();
                counts.accumulate_segmentation(&pre, &pre_truth)?;
                counts.accumulate_segmentation(&post, &batch.building)?;
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = ConfusionCounts::new(classes);
    parts.iter().for_each(|c| total.merge(c));
    Ok(MetricReport::from_counts(&total, epsilon, seg_head))
}

/// Per-pixel argmax (lowest class on ties) of a `B×C×H×W` prediction.
pub(crate) fn argmax_classes(pred: &Prediction) -> Vec<usize> {
    let s = pred.damage.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let d = pred.damage.data();
    let mut out = Vec::with_capacity(b * plane);
    for n in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(n * c + k) * plane + p] > d[(n * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Owns the network and optimizer state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    net: Network,
    optim: OptimizerState,
    next_epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<f64>,
}

fn nonfinite(epoch: usize, batch: usize, term: &str) -> impl Fn(TrainError) -> TrainError + '_ {
    move |e| match e {
        TrainError::Network(NetworkError::Tensor(TensorError::NonFinite { op })) => TrainError::NonFinite {
            epoch,
            batch,
            term: format!("{term} ({op})"),
        },
        TrainError::Objective(crate::objectives::ObjectiveError::Tensor(TensorError::NonFinite { op })) => {
            TrainError::NonFinite {
                epoch,
                batch,
                term: format!("{term} ({op})"),
            }
        }
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let net = Network::new(config.network.clone(), config.seed)?;
        let optim = OptimizerState::new(net.params());
        Ok(Self {
            config,
            net,
            optim,
            next_epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    /// Continues from a checkpoint written by [`Self::checkpoint`].
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        config.validate()?;
        let net = Network::from_checkpoint(ckpt)?;
        if net.config() != &config.network {
            return Err(TrainError::Config("checkpoint network differs from the configured network".into()));
        }
        let optim = OptimizerState::load_from(net.params(), ckpt)?;
        let meta_num = |k: &str| ckpt.meta(k).and_then(|v| v.parse::<f64>().ok());
        let next_epoch = ckpt
            .meta("next_epoch")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Config("checkpoint lacks training progress".into()))?;
        Ok(Self {
            config,
            net,
            optim,
            next_epoch,
            history: Vec::new(),
            best: meta_num("best_val_f1_damage"),
        })
    }

    /// Loads `latest.ckpt` and `history.csv` from a run directory.
    pub fn resume(config: TrainConfig, out_dir: &Path) -> Result<Self, TrainError> {
        let ckpt = Checkpoint::read(out_dir.join("latest.ckpt"))?;
        let mut t = Self::from_checkpoint(config, &ckpt)?;
        let path = out_dir.join("history.csv");
        if let Ok(text) = std::fs::read_to_string(&path) {
            t.history = text
                .lines()
                .skip(1)
                .filter_map(EpochRecord::from_csv)
                .filter(|r| r.epoch < t.next_epoch)
                .collect();
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optim
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// Network, optimizer moments and progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.net.to_checkpoint();
        self.optim.save_into(self.net.params(), &mut ckpt);
        ckpt.set_meta("next_epoch", self.next_epoch);
        ckpt.set_meta("seed", self.config.seed);
        if let Some(b) = self.best {
            ckpt.set_meta("best_val_f1_damage", b);
        }
        ckpt
    }

    /// Batches of `(dataset index, augmentation seed)` for one epoch; fixed
    /// by `(seed, epoch)` alone.
    pub fn epoch_plan(&self, epoch: usize, train: &[usize]) -> Vec<Vec<(usize, u64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        let seeded: Vec<(usize, u64)> = order.into_iter().map(|i| (i, rng.random())).collect();
        seeded.chunks(self.config.batch_size).map(<[_]>::to_vec).collect()
    }

    fn prepare(&self, dataset: &PatchDataset, plan: &[(usize, u64)]) -> Batch {
        let cfg = self.config.augment;
        let samples: Vec<_> = plan
            .par_iter()
            .map(|&(i, seed)| augment(dataset.sample(i), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
            .collect();
        Batch::collate(&samples)
    }

    /// Train-mode loss terms on `g`; returns the total.
    fn record_loss(&mut self, g: &mut Graph<f32>, batch: &Batch, at: (usize, usize)) -> Result<crate::Var, TrainError> {
        let (epoch, b) = at;
        let pre = g.constant(batch.pre.clone()).map_err(NetworkError::from)?;
        let post = g.constant(batch.post.clone()).map_err(NetworkError::from)?;
        let out = self
            .net
            .forward_graph(g, pre, post, Mode::Train)
            .map_err(TrainError::from)
            .map_err(nonfinite(epoch, b, "forward"))?;
        let (w, delta) = (&self.config.weights, self.config.loss_delta);
        let mut total = damage_loss_indices(g, out.damage, &batch.damage, w, delta)
            .map_err(TrainError::from)
            .map_err(nonfinite(epoch, b, "damage"))?;
        for (term, p, y) in [("seg_pre", out.seg_pre, &batch.seg_pre), ("seg_post", out.seg_post, &batch.seg_post)] {
            let Some(p) = p else { continue };
            let l = seg_loss(g, p, y, w, delta)
                .map_err(TrainError::from)
                .map_err(nonfinite(epoch, b, term))?;
            total = g.add(total, l).map_err(NetworkError::from)?;
        }
        Ok(total)
    }

    /// Train-mode loss of `batch` without updating parameters (running
    /// statistics still move).
    pub fn batch_loss(&mut self, batch: &Batch) -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let total = self.record_loss(&mut g, batch, (self.next_epoch, 0))?;
        Ok(f64::from(g.value(total).data()[0]))
    }

    /// One optimization step; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch, lr: f64, epoch: usize, index: usize) -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let total = self.record_loss(&mut g, batch, (epoch, index))?;
        let loss = f64::from(g.value(total).data()[0]);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: index,
                term: "total".into(),
            });
        }
        g.backward(total).map_err(NetworkError::from)?;
        self.net.clear_grads();
        self.net.absorb_grads(&g)?;
        if let Some(p) = self
            .net
            .params()
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(TrainError::NonFinite {
                epoch,
                batch: index,
                term: format!("gradient of {}", p.name),
            });
        }
        adam_step(self.net.params_mut(), &mut self.optim, lr, &self.config.adam)?;
        Ok(loss)
    }

    /// Trains one epoch and validates.
    pub fn run_epoch(&mut self, data: TrainData<'_>) -> Result<EpochRecord, TrainError> {
        if data.train.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        let epoch = self.next_epoch;
        let lr = lr_schedule(epoch, &self.config)?;
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for (b, plan) in self.epoch_plan(epoch, data.train).iter().enumerate() {
            let batch = self.prepare(data.dataset, plan);
            let loss = self.step(&batch, lr, epoch, b)?;
            weighted += loss * batch.len() as f64;
            seen += batch.len();
        }
        let (f1d, f1s) = if data.val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(
                &self.net,
                data.dataset,
                data.val,
                self.config.eval_batch_size,
                self.config.f1_epsilon,
            )?;
            (Some(r.f1_damage), Some(r.f1_seg))
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: weighted / seen as f64,
            val_f1_damage: f1d,
            val_f1_seg: f1s,
        };
        self.history.push(record);
        self.next_epoch += 1;
        Ok(record)
    }

    /// Runs until `stop_epoch` (exclusive, capped at the configured count),
    /// writing `history.csv`, `latest.ckpt` and `best.ckpt` under `out_dir`.
    pub fn fit_until(
        &mut self,
        data: TrainData<'_>,
        out_dir: Option<&Path>,
        stop_epoch: usize,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<(), TrainError> {
        if data.train.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let stop = stop_epoch.min(self.config.epochs);
        while self.next_epoch < stop {
            let record = self.run_epoch(data)?;
            on_epoch(&record);
            let improved = match (record.val_f1_damage, self.best) {
                (Some(f), Some(b)) => f > b,
                (Some(_), None) => true,
                (None, _) => record.epoch == 0,
            };
            if improved {
                self.best = record.val_f1_damage.or(self.best);
            }
            let Some(dir) = out_dir else { continue };
            let ckpt = self.checkpoint();
            if improved {
                ckpt.write(dir.join("best.ckpt"))?;
            }
            if self.next_epoch.is_multiple_of(self.config.checkpoint_every) || self.next_epoch == stop {
                ckpt.write(dir.join("latest.ckpt"))?;
            }
            self.write_history(&dir.join("history.csv"))?;
        }
        Ok(())
    }

    pub fn fit(&mut self, data: TrainData<'_>, out_dir: Option<&Path>) -> Result<(), TrainError> {
        self.fit_until(data, out_dir, self.config.epochs, |_| {})
    }

    fn write_history(&self, path: &Path) -> Result<(), TrainError> {
        let mut text = format!("{HISTORY_HEADER}\n");
        for r in &self.history {
            text += &r.to_csv();
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 1e-3);
        assert_eq!(lr_schedule(99, &cfg).unwrap(), 0.0);
        let cfg = TrainConfig { epochs: 101, ..cfg };
        assert!((lr_schedule(50, &cfg).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_schedule(101, &cfg).is_err());
        let one = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(lr_schedule(0, &one).unwrap(), 1e-3);
    }

    #[test]
    fn history_csv_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            lr: 0.000_25,
            train_loss: 1.0 / 3.0,
            val_f1_damage: Some(0.125),
            val_f1_seg: None,
        };
        assert_eq!(EpochRecord::from_csv(&r.to_csv()), Some(r));
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig::desk(Variant::FcEf);
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_kv() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("colour", "red").unwrap());
    }
}
