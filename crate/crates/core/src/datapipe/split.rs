use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scene::PatchDataset;
use super::{io_err, DataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    /// Patches are partitioned directly (Split I).
    PatchLevel,
    /// Scenes are partitioned, then expanded to their patches (Split II).
    SceneLevel,
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::PatchLevel => "i",
            SplitStrategy::SceneLevel => "ii",
        })
    }
}

impl std::str::FromStr for SplitStrategy {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" | "split-i" => Ok(SplitStrategy::PatchLevel),
            "ii" | "2" | "split-ii" => Ok(SplitStrategy::SceneLevel),
            _ => Err(DataError::InvalidSplit(format!("unknown strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    /// train, val, test
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(strategy: SplitStrategy, seed: u64) -> Self {
        Self {
            strategy,
            ratios: [0.6, 0.2, 0.2],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("ratios {:?} must be positive and sum to 1", self.ratios)));
        }
        Ok(())
    }
}

/// Item indices per partition, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rounded partition sizes, each at least 1.
fn sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = (ratios[0] * n as f64).round() as usize;
    let val = (ratios[1] * n as f64).round() as usize;
    let mut s = [train.min(n), val.min(n - train.min(n)), 0];
    s[2] = n - s[0] - s[1];
    while let Some(empty) = s.iter().position(|&v| v == 0) {
        let largest = (0..3).max_by_key(|&i| (s[i], usize::MAX - i)).expect("three parts");
        s[largest] -= 1;
        s[empty] += 1;
    }
    s
}

/// Partitions items whose scene of origin is `scene_ids[i]`.
pub fn split<S: AsRef<str>>(scene_ids: &[S], spec: &SplitSpec) -> Result<Partition, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Partition::default();
    match spec.strategy {
        SplitStrategy::PatchLevel => {
            let n = scene_ids.len();
            if n < 3 {
                return Err(DataError::TooFewItems { items: n, what: "patches" });
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let [a, b, _] = sizes(n, spec.ratios);
            out.train = order[..a].to_vec();
            out.val = order[a..a + b].to_vec();
            out.test = order[a + b..].to_vec();
        }
        SplitStrategy::SceneLevel => {
            let unique: BTreeSet<&str> = scene_ids.iter().map(AsRef::as_ref).collect();
            let mut scenes: Vec<&str> = unique.into_iter().collect();
            if scenes.len() < 3 {
                return Err(DataError::TooFewItems {
                    items: scenes.len(),
                    what: "scenes",
                });
            }
            scenes.shuffle(&mut rng);
            let [a, b, _] = sizes(scenes.len(), spec.ratios);
            let part_of = |id: &str| {
                let k = scenes.iter().position(|&s| s == id).expect("known scene");
                if k < a {
                    0
                } else if k < a + b {
                    1
                } else {
                    2
                }
            };
            for (i, id) in scene_ids.iter().enumerate() {
                match part_of(id.as_ref()) {
                    0 => out.train.push(i),
                    1 => out.val.push(i),
                    _ => out.test.push(i),
                }
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// One manifest line: `scene_id` or `scene_id:patch_index`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub patch: Option<usize>,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.patch {
            Some(p) => write!(f, "{}:{p}", self.scene_id),
            None => f.write_str(&self.scene_id),
        }
    }
}

const MANIFEST_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

impl PatchDataset {
    /// Splits this dataset's patches.
    pub fn split(&self, spec: &SplitSpec) -> Result<Partition, DataError> {
        let ids: Vec<&str> = (0..self.len()).map(|i| self.scene_of(i)).collect();
        split(&ids, spec)
    }

    /// Manifest lines for one partition: patch entries for Split I, scene
    /// entries for Split II.
    pub fn manifest_entries(&self, items: &[usize], strategy: SplitStrategy) -> Vec<ManifestEntry> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &i in items {
            let id = self.scene_of(i).to_string();
            match strategy {
                SplitStrategy::PatchLevel => out.push(ManifestEntry {
                    scene_id: id,
                    patch: Some(self.patch_refs()[i].index),
                }),
                SplitStrategy::SceneLevel => {
                    if seen.insert(id.clone()) {
                        out.push(ManifestEntry { scene_id: id, patch: None });
                    }
                }
            }
        }
        out
    }

    /// Patch indices named by manifest entries, sorted ascending.
    pub fn resolve(&self, entries: &[ManifestEntry]) -> Result<Vec<usize>, DataError> {
        let mut out = Vec::new();
        for e in entries {
            match e.patch {
                Some(p) => out.push(self.find(&e.scene_id, p).ok_or_else(|| {
                    DataError::InvalidSplit(format!("manifest names unknown patch {e}"))
                })?),
                None => {
                    let before = out.len();
                    out.extend((0..self.len()).filter(|&i| self.scene_of(i) == e.scene_id));
                    if out.len() == before {
                        return Err(DataError::InvalidSplit(format!("manifest names unknown scene {e}")));
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Writes `train.txt`, `val.txt`, `test.txt` under `dir`.
pub fn write_manifests(dir: &Path, parts: [&[ManifestEntry]; 3]) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (file, entries) in MANIFEST_FILES.iter().zip(parts) {
        let path = dir.join(file);
        let text: String = entries.iter().map(|e| format!("{e}\n")).collect();
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry = match line.rsplit_once(':') {
            Some((id, p)) => ManifestEntry {
                scene_id: id.to_string(),
                patch: Some(p.parse().map_err(|_| DataError::Manifest {
                    path: path.to_path_buf(),
                    line: n + 1,
                    detail: format!("bad patch index '{p}'"),
                })?),
            },
            None => ManifestEntry {
                scene_id: line.to_string(),
                patch: None,
            },
        };
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounded_sizes() {
        assert_eq!(sizes(100, [0.6, 0.2, 0.2]), [60, 20, 20]);
        assert_eq!(sizes(50, [0.6, 0.2, 0.2]), [30, 10, 10]);
        assert_eq!(sizes(3, [0.6, 0.2, 0.2]), [1, 1, 1]);
        assert_eq!(sizes(4, [0.6, 0.2, 0.2]), [2, 1, 1]);
    }

    #[test]
    fn too_few_scenes() {
        let ids = ["a", "a", "b", "b"];
        let spec = SplitSpec::new(SplitStrategy::SceneLevel, 0);
        assert!(matches!(split(&ids, &spec), Err(DataError::TooFewItems { items: 2, .. })));
    }
}
