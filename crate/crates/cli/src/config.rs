//! Layered `key=value` run configuration: file, then `SUNA_*` environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};

use suna_core::datapipe::SplitStrategy;
use suna_core::network::Variant;
use suna_core::trainer::TrainConfig;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "SUNA_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(CliError::Config(format!("preset: expected 'paper' or 'desk', got '{other}'"))),
        }
    }
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    File(PathBuf, usize),
    Env(String),
    Flag(&'static str),
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::File(p, line) => write!(f, "{}:{line}", p.display()),
            Source::Env(name) => write!(f, "environment variable {name}"),
            Source::Flag(name) => write!(f, "flag --{name}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Layers {
    entries: Vec<(String, String, Source)>,
}

impl Layers {
    pub fn push(&mut self, key: &str, value: impl ToString, source: Source) {
        self.entries.push((key.to_string(), value.to_string(), source));
    }

    pub fn file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("{}:{}: expected key=value", path.display(), i + 1)));
            };
            self.push(k.trim(), v.trim(), Source::File(path.to_path_buf(), i + 1));
        }
        Ok(())
    }

    pub fn env(&mut self, vars: impl IntoIterator<Item = (String, String)>) {
        let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.push(&key, v, Source::Env(k));
        }
    }

    /// `KEY=VALUE` strings from repeated `--set`.
    pub fn assignments(&mut self, items: &[String]) -> Result<(), CliError> {
        for item in items {
            let Some((k, v)) = item.split_once('=') else {
                return Err(CliError::Config(format!("--set {item}: expected KEY=VALUE")));
            };
            self.push(k.trim(), v.trim(), Source::Flag("set"));
        }
        Ok(())
    }
}

/// Everything `suna train` needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: SplitStrategy,
}

impl RunConfig {
    pub fn resolve(layers: &Layers) -> Result<Self, CliError> {
        let mut preset = Preset::Paper;
        for (k, v, _) in &layers.entries {
            if k == "preset" {
                preset = v.parse()?;
            }
        }
        let train = match preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(Variant::SiamUnetAttnConc),
        };
        let mut cfg = Self {
            train,
            data_root: None,
            out: None,
            split: SplitStrategy::PatchLevel,
        };
        for (k, v, source) in &layers.entries {
            let ok = match k.as_str() {
                "preset" => true,
                "data_root" => {
                    cfg.data_root = Some(PathBuf::from(v));
                    true
                }
                "out" => {
                    cfg.out = Some(PathBuf::from(v));
                    true
                }
                "split" => {
                    cfg.split = v.parse().map_err(|e| CliError::Config(format!("{source}: split: {e}")))?;
                    true
                }
                _ => cfg.train.set(k, v).map_err(|e| CliError::Config(format!("{source}: {e}")))?,
            };
            if !ok {
                return Err(CliError::Config(format!("{source}: unknown key '{k}'")));
            }
        }
        cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Fully resolved settings, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.data_root {
            out += &format!("data_root={}\n", p.display());
        }
        if let Some(p) = &self.out {
            out += &format!("out={}\n", p.display());
        }
        out += &format!("split={}\n", self.split);
        for (k, v) in self.train.to_kv() {
            out += &format!("{k}={v}\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(items: &[(&str, &str)]) -> Layers {
        let mut l = Layers::default();
        for (k, v) in items {
            l.push(k, v, Source::Flag("test"));
        }
        l
    }

    #[test]
    fn later_layers_win() {
        let mut l = layers(&[("epochs", "5"), ("lr", "0.01")]);
        l.env([("SUNA_EPOCHS".to_string(), "7".to_string()), ("HOME".into(), "/x".into())]);
        l.push("epochs", 9, Source::Flag("epochs"));
        let cfg = RunConfig::resolve(&l).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lr0, 0.01);
    }

    #[test]
    fn unknown_keys_name_their_source() {
        let mut l = Layers::default();
        l.env([("SUNA_BOGUS".to_string(), "1".to_string())]);
        let err = RunConfig::resolve(&l).unwrap_err().to_string();
        assert!(err.contains("SUNA_BOGUS") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let cfg = RunConfig::resolve(&layers(&[("epochs", "3"), ("preset", "desk")])).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.train.network.input_size), (3, 32, 64));
        let cfg = RunConfig::resolve(&Layers::default()).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.lr0, cfg.train.network.input_size), (100, 1e-3, 256));
    }

    #[test]
    fn resolved_text_reloads_to_the_same_config() {
        let cfg = RunConfig::resolve(&layers(&[("preset", "desk"), ("variant", "fc-ef"), ("split", "ii")])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        std::fs::write(&path, cfg.to_text()).unwrap();
        let mut l = Layers::default();
        l.file(&path).unwrap();
        let again = RunConfig::resolve(&l).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.split, SplitStrategy::SceneLevel);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "# comment\n\nepochs 3\n").unwrap();
        let err = Layers::default().file(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
