use std::path::{Path, PathBuf};

use image::imageops;
use suna_core::datapipe::{
    load_dataset, load_scene, patchify, read_manifest, synth_generate, ManifestEntry, write_dataset, write_manifests, PatchDataset,
    ScenePair, SplitSpec, SplitStrategy,
};
use suna_core::inference::{export_attention, predict_scene, write_heat_png, write_scene_outputs};
use suna_core::network::{Checkpoint, Network};
use suna_core::objectives::DEFAULT_EPSILON;
use suna_core::trainer::{evaluate, TrainData, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn load_scenes(root: &Path) -> Result<Vec<ScenePair>, CliError> {
    if !root.is_dir() {
        return Err(CliError::Data(format!("data root {} is not a directory", root.display())));
    }
    Ok(load_dataset(root)?)
}

/// Split manifests for `spec` under `dir`.
fn write_split(dir: &Path, ds: &PatchDataset, spec: &SplitSpec) -> Result<(), CliError> {
    let [a, b, c] = split_entries(ds, spec)?;
    write_manifests(dir, [&a, &b, &c])?;
    Ok(())
}

fn split_entries(ds: &PatchDataset, spec: &SplitSpec) -> Result<[Vec<ManifestEntry>; 3], CliError> {
    let part = ds.split(spec)?;
    Ok(part.parts().map(|items| ds.manifest_entries(items, spec.strategy)))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::read(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn train(cfg: RunConfig, resume: bool) -> Result<(), CliError> {
    let root = cfg
        .data_root
        .clone()
        .ok_or_else(|| CliError::Config("no data root given (--data-root or data_root=)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory given (--out or out=)".into()))?;
    let scenes = load_scenes(&root)?;
    let ds = PatchDataset::new(scenes, cfg.train.network.input_size)?;
    let spec = SplitSpec::new(cfg.split, cfg.train.seed);
    let part = ds.split(&spec)?;

    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let config_path = out.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).map_err(io_err(&config_path))?;
    write_split(&out.join("splits"), &ds, &spec)?;

    let mut trainer = if resume && out.join("latest.ckpt").exists() {
        Trainer::resume(cfg.train.clone(), &out)?
    } else {
        Trainer::new(cfg.train.clone())?
    };
    let data = TrainData {
        dataset: &ds,
        train: &part.train,
        val: &part.val,
    };
    trainer.fit_until(data, Some(&out), cfg.train.epochs, |r| eprintln!("{}", r.to_csv()))?;
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_root: PathBuf,
    pub split: SplitStrategy,
    pub seed: Option<u64>,
    pub partition: String,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
}

pub fn eval(args: EvalArgs) -> Result<String, CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let net = Network::from_checkpoint(&ckpt).map_err(|e| CliError::from(e).context(args.checkpoint.display()))?;
    let scenes = load_scenes(&args.data_root)?;
    let ds = PatchDataset::new(scenes, net.config().input_size)?;
    let items = match &args.manifest {
        Some(path) => ds.resolve(&read_manifest(path)?)?,
        None => {
            let seed = match args.seed {
                Some(s) => s,
                None => ckpt.meta("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
            };
            let part = ds.split(&SplitSpec::new(args.split, seed))?;
            match args.partition.as_str() {
                "train" => part.train,
                "val" => part.val,
                "test" => part.test,
                other => return Err(CliError::Config(format!("partition must be train, val or test, got '{other}'"))),
            }
        }
    };
    if items.is_empty() {
        return Err(CliError::Data("evaluation split is empty".into()));
    }
    let report = evaluate(&net, &ds, &items, args.batch_size, DEFAULT_EPSILON)?;
    let out = match args.out {
        Some(d) => d,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let path = out.join("metrics.json");
    std::fs::write(&path, report.to_json() + "\n").map_err(io_err(&path))?;
    Ok(report.to_kv_lines())
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub scene: PathBuf,
    pub stride: usize,
    pub query: Option<(usize, usize)>,
    pub out: PathBuf,
    pub batch_size: usize,
}

/// Window of `scene` containing `(row, col)` on the non-overlapping grid,
/// shifted inward at the borders.
fn query_window(scene: &ScenePair, p: usize, (row, col): (usize, usize)) -> Result<(ScenePair, (usize, usize)), CliError> {
    let (h, w) = scene.extent();
    if row >= h || col >= w {
        return Err(CliError::Config(format!("query ({row}, {col}) outside the {h}×{w} scene")));
    }
    let r0 = (row / p * p).min(h - p);
    let c0 = (col / p * p).min(w - p);
    let (x, y, s) = (c0 as u32, r0 as u32, p as u32);
    let crop = ScenePair {
        scene_id: scene.scene_id.clone(),
        pre: imageops::crop_imm(&scene.pre, x, y, s, s).to_image(),
        post: imageops::crop_imm(&scene.post, x, y, s, s).to_image(),
        labels: imageops::crop_imm(&scene.labels, x, y, s, s).to_image(),
    };
    Ok((crop, (row - r0, col - c0)))
}

pub fn predict(args: PredictArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let net = Network::from_checkpoint(&ckpt).map_err(|e| CliError::from(e).context(args.checkpoint.display()))?;
    if args.query.is_some() && !net.variant().has_attention() {
        return Err(CliError::Config(format!("variant {} has no attention block to query", net.variant())));
    }
    let scene = load_scene(&args.scene)?;
    let out = predict_scene(&net, &scene, args.stride, args.batch_size)?;
    write_scene_outputs(&args.out, &out)?;
    if let Some(q) = args.query {
        let p = net.config().input_size;
        let (crop, local) = query_window(&scene, p, q)?;
        let sample = patchify(&crop, p)?.remove(0);
        let heat = export_attention(&net, &sample, local)?;
        write_heat_png(&args.out.join("attention.png"), &heat)?;
    }
    Ok(())
}

pub struct SynthArgs {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub patch: usize,
    pub out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let scenes = synth_generate(args.n, args.size, args.seed)?;
    let ds = PatchDataset::new(scenes, args.patch)?;
    let mut manifests = Vec::new();
    for strategy in [SplitStrategy::PatchLevel, SplitStrategy::SceneLevel] {
        let dir = args.out.join("splits").join(strategy.to_string());
        manifests.push((dir, split_entries(&ds, &SplitSpec::new(strategy, args.seed))?));
    }
    write_dataset(&args.out, ds.scenes())?;
    for (dir, [a, b, c]) in &manifests {
        write_manifests(dir, [a, b, c])?;
    }
    Ok(())
}
