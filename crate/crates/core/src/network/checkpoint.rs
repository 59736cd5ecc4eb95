//! Binary checkpoint layout (all integers u32 little-endian):
//!
//! ```text
//! "SUNA" | version | config_len | config (UTF-8 key=value lines)
//! | tensor_count | { name_len | name | rank | extents… | f32 LE data }…
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::model::{NamedStats, Network};
use super::{NetworkConfig, NetworkError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SUNA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Config keys with this prefix carry run metadata, not architecture.
const META_PREFIX: &str = "meta.";
/// Tensors with this prefix belong to the optimizer.
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint string is not UTF-8")]
    InvalidUtf8,
    #[error("malformed config line '{0}'")]
    MalformedConfig(String),
    #[error("checkpoint lacks tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor '{0}'")]
    UnexpectedTensor(String),
    #[error("tensor '{name}' shaped {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        let full = format!("{META_PREFIX}{key}");
        self.config.iter().find(|(k, _)| *k == full).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let full = format!("{META_PREFIX}{key}");
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| *k == full) {
            Some(slot) => slot.1 = value,
            None => self.config.push((full, value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Optimizer tensors with the `optim.` prefix stripped.
    pub fn optimizer_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(OPTIM_PREFIX).map(|s| (s, t)))
    }

    pub fn push_optimizer_tensor(&mut self, name: &str, tensor: Tensor<f32>) {
        self.tensors.push((format!("{OPTIM_PREFIX}{name}"), tensor));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::InvalidUtf8)?;
        let mut config = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::MalformedConfig(line.to_string()))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::InvalidUtf8)?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or(CheckpointError::Truncated)?;
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(shape, data).expect("length checked");
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::MalformedConfig("trailing bytes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(&self.encode())?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

fn stats_names(s: &NamedStats) -> (String, String) {
    (format!("{}.running_mean", s.name), format!("{}.running_var", s.name))
}

impl Network {
    /// Parameters and running statistics, with the architecture config.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.detached()))
            .collect();
        for s in self.stats() {
            let (m, v) = stats_names(s);
            tensors.push((m, s.stats.mean.detached()));
            tensors.push((v, s.stats.var.detached()));
        }
        Checkpoint {
            config: self.config().to_kv(),
            tensors,
        }
    }

    /// Rebuilds a network, requiring every parameter by name and shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetworkError> {
        let config = NetworkConfig::from_kv(
            ckpt.config
                .iter()
                .filter(|(k, _)| !k.starts_with(META_PREFIX))
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )?;
        let mut net = Network::new(config, 0)?;
        let mut seen = 0usize;
        let mut load = |name: &str, target: &mut Tensor<f32>| -> Result<(), CheckpointError> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if t.shape() != target.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: target.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            target.data_mut().copy_from_slice(t.data());
            seen += 1;
            Ok(())
        };
        for p in net.params_mut() {
            load(&p.name, &mut p.tensor)?;
        }
        for s in net.stats_mut() {
            let (m, v) = stats_names(s);
            load(&m, &mut s.stats.mean)?;
            load(&v, &mut s.stats.var)?;
        }
        let model_tensors = ckpt.tensors.iter().filter(|(n, _)| !n.starts_with(OPTIM_PREFIX));
        if model_tensors.clone().count() != seen {
            let known: std::collections::HashSet<String> = net
                .params()
                .iter()
                .map(|p| p.name.clone())
                .chain(net.stats().iter().flat_map(|s| {
                    let (m, v) = stats_names(s);
                    [m, v]
                }))
                .collect();
            let extra = model_tensors
                .map(|(n, _)| n)
                .find(|n| !known.contains(*n))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::UnexpectedTensor(extra).into());
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let mut c = Checkpoint::default();
        c.config.push(("depth".into(), "2".into()));
        c.set_meta("epoch", 3);
        c.tensors.push(("a".into(), Tensor::new(vec![2, 1], vec![1.5, -0.25]).unwrap()));
        c.push_optimizer_tensor("m.a", Tensor::zeros(vec![2, 1]));
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("epoch"), Some("3"));
        assert_eq!(back.optimizer_tensors().count(), 1);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = Checkpoint::default().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
    }
}
