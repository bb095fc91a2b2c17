//! Feature-file I/O, dataset manifests, synthetic MIL task generation, and
//! evaluation metrics.

mod features;
mod metrics;
mod synthetic;

pub use features::{read_features, write_features, FEATURE_MAGIC};
pub use metrics::{balanced_accuracy, confusion_matrix, evaluate, roc_auc, weighted_f1, MetricsReport};
pub use synthetic::{generate_synthetic, witness_oracle_score, SyntheticTask, SyntheticTaskConfig};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// One bag of instance embeddings: an `n x d` row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T: Scalar> {
    pub n: usize,
    pub d: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(n: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Input(format!("feature sequence must be non-empty, got {n} x {d}")));
        }
        if data.len() != n * d {
            return Err(Error::dim("feature_sequence", format!("{} values for {n} x {d}", data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "feature_sequence" });
        }
        Ok(FeatureSequence { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }
}

/// A bag plus its label and identifier.
#[derive(Clone, Debug)]
pub struct BagRecord<T: Scalar> {
    pub features: FeatureSequence<T>,
    pub label: usize,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitKind::Train => write!(f, "train"),
            SplitKind::Val => write!(f, "val"),
            SplitKind::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Input(format!("unknown split '{other}' (expected train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub split: SplitKind,
}

/// Dataset manifest: bag files, labels, and split assignment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub d: usize,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Resolve an entry path relative to the manifest's directory.
    pub fn resolve(&self, base: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Structural checks: labels in range, files present and d-consistent.
    /// `for_training` additionally requires every split to be non-empty.
    pub fn validate(&self, base: &Path, for_training: bool) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("manifest num_classes {} < 2", self.num_classes)));
        }
        let mut seen: BTreeSet<SplitKind> = BTreeSet::new();
        for entry in &self.entries {
            if entry.label >= self.num_classes {
                return Err(Error::Input(format!(
                    "label {} out of range for {} classes ({})",
                    entry.label, self.num_classes, entry.path
                )));
            }
            let path = self.resolve(base, entry);
            if !path.is_file() {
                return Err(Error::Input(format!("manifest references missing file {}", path.display())));
            }
            seen.insert(entry.split);
        }
        if for_training {
            for split in [SplitKind::Train, SplitKind::Val] {
                if !seen.contains(&split) {
                    return Err(Error::Input(format!("split '{split}' is empty")));
                }
            }
        }
        Ok(())
    }

    /// Load all bags of one split, in manifest order.
    pub fn load_split<T: Scalar>(&self, base: &Path, split: SplitKind) -> Result<Vec<BagRecord<T>>> {
        let mut bags = Vec::new();
        for entry in self.entries.iter().filter(|e| e.split == split) {
            let path = self.resolve(base, entry);
            let features = read_features::<T>(&path)?;
            if features.d != self.d {
                return Err(Error::Input(format!(
                    "bag {} has d={} but manifest declares d={}",
                    path.display(),
                    features.d,
                    self.d
                )));
            }
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| entry.path.clone());
            bags.push(BagRecord { features, label: entry.label, id });
        }
        if bags.is_empty() {
            return Err(Error::Input(format!("split '{split}' is empty")));
        }
        Ok(bags)
    }
}

impl Ord for SplitKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl PartialOrd for SplitKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
