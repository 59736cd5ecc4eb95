mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use suna_core::datapipe::SplitStrategy;
use suna_core::network::Variant;
use suna_core::trainer::TrainConfig;

use config::{Layers, RunConfig, Source};
use error::CliError;

#[derive(Parser)]
#[command(name = "suna", version, about = "Siamese U-Net with self-attention for building damage assessment")]
struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; settings layer as config file < SUNA_* env < flags
    Train(TrainArgs),
    /// Score a checkpoint on a dataset partition
    Eval(EvalCmd),
    /// Full-resolution prediction for one scene
    Predict(PredictCmd),
    /// Write a synthetic dataset with split manifests
    Synth(SynthCmd),
}

fn train_help(flag: &str) -> String {
    let d = TrainConfig::default();
    match flag {
        "variant" => format!("Network variant, one of {} [default: {}]", variants(), d.network.variant),
        "split" => "Split strategy: i (patch level) or ii (scene level) [default: i]".into(),
        "seed" => format!("Seed for initialization, data order, augmentation and split [default: {}]", d.seed),
        "epochs" => format!("Training epochs [default: {}]", d.epochs),
        "lr" => format!("Initial learning rate, decayed linearly to zero [default: {}]", d.lr0),
        "batch" => format!("Training batch size [default: {}]", d.batch_size),
        "patch" => format!("Patch side in pixels (network input size) [default: {}]", d.network.input_size),
        _ => unreachable!(),
    }
}

fn variants() -> String {
    Variant::ALL.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding <scene_id>/{pre,post,labels}.png
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Run directory for config.txt, history.csv, checkpoints and manifests
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base settings: paper or desk (64-pixel depth-4 model, batch 32, 30 epochs) [default: paper]
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, help = train_help("variant"))]
    variant: Option<String>,
    #[arg(long, help = train_help("split"))]
    split: Option<String>,
    #[arg(long, help = train_help("seed"))]
    seed: Option<u64>,
    #[arg(long, help = train_help("epochs"))]
    epochs: Option<usize>,
    #[arg(long, help = train_help("lr"))]
    lr: Option<f64>,
    #[arg(long, help = train_help("batch"))]
    batch_size: Option<usize>,
    #[arg(long, help = train_help("patch"))]
    patch: Option<usize>,
    /// Any other configuration key, as KEY=VALUE (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from <out>/latest.ckpt when present
    #[arg(long)]
    resume: bool,
}

impl TrainArgs {
    fn resolve(&self, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, CliError> {
        let mut layers = Layers::default();
        if let Some(path) = &self.config {
            layers.file(path)?;
        }
        layers.env(env);
        let flags: [(&'static str, &str, Option<String>); 9] = [
            ("preset", "preset", self.preset.clone()),
            ("data-root", "data_root", self.data_root.as_ref().map(|p| p.display().to_string())),
            ("out", "out", self.out.as_ref().map(|p| p.display().to_string())),
            ("variant", "variant", self.variant.clone()),
            ("split", "split", self.split.clone()),
            ("seed", "seed", self.seed.map(|v| v.to_string())),
            ("epochs", "epochs", self.epochs.map(|v| v.to_string())),
            ("lr", "lr", self.lr.map(|v| v.to_string())),
            ("batch-size", "batch_size", self.batch_size.map(|v| v.to_string())),
        ];
        for (flag, key, value) in flags {
            if let Some(v) = value {
                layers.push(key, v, Source::Flag(flag));
            }
        }
        if let Some(p) = self.patch {
            layers.push("input_size", p, Source::Flag("patch"));
        }
        layers.assignments(&self.set)?;
        RunConfig::resolve(&layers)
    }
}

#[derive(Args)]
struct EvalCmd {
    /// Checkpoint written by `suna train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root
    #[arg(long)]
    data_root: PathBuf,
    /// Split strategy used to pick the partition: i or ii
    #[arg(long, default_value = "i")]
    split: SplitStrategy,
    /// Split seed [default: the checkpoint's training seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Partition to score: train, val or test
    #[arg(long, default_value = "test")]
    partition: String,
    /// Manifest file listing the items to score; overrides --split/--partition
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for metrics.json [default: the checkpoint's directory]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inference batch size
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictCmd {
    /// Checkpoint written by `suna train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory holding pre.png, post.png and labels.png
    #[arg(long)]
    scene: PathBuf,
    /// Moving-window stride in pixels
    #[arg(long, default_value_t = 32)]
    stride: usize,
    /// Scene pixel R,C whose attention map is written to attention.png
    #[arg(long, value_name = "R,C", value_parser = parse_query)]
    query: Option<(usize, usize)>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Windows per forward pass
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

fn parse_query(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected R,C")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((n(r)?, n(c)?))
}

#[derive(Args)]
struct SynthCmd {
    /// Number of scenes
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Scene side in pixels
    #[arg(long, default_value_t = 1024)]
    size: usize,
    /// Generator and split seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch side used for the Split I manifests
    #[arg(long, default_value_t = 256)]
    patch: usize,
    /// Dataset root to write
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Config("--workers must be positive".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Train(args) => commands::train(args.resolve(std::env::vars())?, args.resume),
        Command::Eval(a) => {
            let lines = commands::eval(commands::EvalArgs {
                checkpoint: a.checkpoint,
                data_root: a.data_root,
                split: a.split,
                seed: a.seed,
                partition: a.partition,
                manifest: a.manifest,
                out: a.out,
                batch_size: a.batch_size,
            })?;
            print!("{lines}");
            Ok(())
        }
        Command::Predict(a) => commands::predict(commands::PredictArgs {
            checkpoint: a.checkpoint,
            scene: a.scene,
            stride: a.stride,
            query: a.query,
            out: a.out,
            batch_size: a.batch_size,
        }),
        Command::Synth(a) => commands::synth(commands::SynthArgs {
            n: a.n,
            size: a.size,
            seed: a.seed,
            patch: a.patch,
            out: a.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
