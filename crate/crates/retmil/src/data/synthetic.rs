//! Synthetic MIL task generator.
//!
//! Negative bags draw every instance from an isotropic Gaussian
//! `Normal(0, sigma^2 I)`. Positive bags additionally contain `k` witness
//! instances drawn from `Normal(delta * u, sigma^2 I)` for a fixed unit
//! direction `u`, placed at random positions. Labels are balanced per split
//! and everything is deterministic under the configured seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_features, FeatureSequence, Manifest, ManifestEntry, SplitKind};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub d: usize,
    pub n_range: (usize, usize),
    pub witness_range: (usize, usize),
    /// Separation of the witness mean along the hidden direction.
    pub delta: f64,
    /// Instance noise scale.
    pub sigma: f64,
    pub bags_train: usize,
    pub bags_val: usize,
    pub bags_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            d: 64,
            n_range: (64, 256),
            witness_range: (5, 10),
            delta: 6.0,
            sigma: 1.0,
            bags_train: 200,
            bags_val: 50,
            bags_test: 100,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("synthetic: d must be positive".into()));
        }
        // delta = 0 is admitted as the degenerate "indistinguishable classes"
        // task; negative separations make no sense.
        if self.delta < 0.0 || self.sigma <= 0.0 {
            return Err(Error::Config("synthetic: delta must be >= 0 and sigma > 0".into()));
        }
        if self.n_range.0 < 1 || self.n_range.0 > self.n_range.1 {
            return Err(Error::Config(format!("synthetic: bad n_range {:?}", self.n_range)));
        }
        if self.witness_range.0 < 1 || self.witness_range.0 > self.witness_range.1 {
            return Err(Error::Config(format!("synthetic: bad witness_range {:?}", self.witness_range)));
        }
        if self.witness_range.1 > self.n_range.0 {
            return Err(Error::Config("synthetic: witness count may exceed bag size".into()));
        }
        if self.bags_train == 0 || self.bags_val == 0 || self.bags_test == 0 {
            return Err(Error::Config("synthetic: every split needs at least one bag".into()));
        }
        Ok(())
    }
}

/// Ground truth of a generated task, written next to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: SyntheticTaskConfig,
    /// Hidden witness direction (unit norm).
    pub direction: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the stream identical across platforms.
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn make_bag<T: Scalar>(
    cfg: &SyntheticTaskConfig,
    direction: &[f64],
    positive: bool,
    rng: &mut ChaCha8Rng,
) -> FeatureSequence<T> {
    let n = rng.gen_range(cfg.n_range.0..=cfg.n_range.1);
    let mut data = vec![0.0f64; n * cfg.d];
    for v in &mut data {
        *v = cfg.sigma * gaussian(rng);
    }
    if positive {
        let k = rng.gen_range(cfg.witness_range.0..=cfg.witness_range.1);
        // distinct witness positions
        let mut positions: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n);
            positions.swap(i, j);
        }
        for &pos in &positions[..k] {
            for (c, &u) in direction.iter().enumerate() {
                data[pos * cfg.d + c] += cfg.delta * u;
            }
        }
    }
    let converted: Vec<T> = data.into_iter().map(T::from_f64).collect();
    FeatureSequence::new(n, cfg.d, converted).expect("generated bag is valid")
}

/// Generate bag files plus `manifest.json` and `task.json` in `out_dir`.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig, out_dir: &Path) -> Result<(Manifest, SyntheticTask)> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut direction = vec![0.0f64; cfg.d];
    for v in &mut direction {
        *v = gaussian(&mut rng);
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut direction {
        *v /= norm;
    }

    let mut entries = Vec::new();
    for (split, count) in [
        (SplitKind::Train, cfg.bags_train),
        (SplitKind::Val, cfg.bags_val),
        (SplitKind::Test, cfg.bags_test),
    ] {
        for i in 0..count {
            let positive = i % 2 == 1;
            let bag = make_bag::<f32>(cfg, &direction, positive, &mut rng);
            let name = format!("{split}_{i:04}.rmil");
            write_features(&out_dir.join(&name), &bag)?;
            entries.push(ManifestEntry { path: name, label: usize::from(positive), split });
        }
    }

    let manifest = Manifest { entries, num_classes: 2, d: cfg.d };
    manifest.save(&out_dir.join("manifest.json"))?;
    let task = SyntheticTask { config: cfg.clone(), direction };
    std::fs::write(out_dir.join("task.json"), serde_json::to_string_pretty(&task)?)?;
    Ok((manifest, task))
}

/// Brute-force bag score independent of any learned model: the mean of the
/// top-k projections onto the witness direction. Thresholding this at
/// delta/2 separates well-specified tasks, which confirms solvability.
pub fn witness_oracle_score<T: Scalar>(bag: &FeatureSequence<T>, direction: &[f64], k: usize) -> f64 {
    let mut projections: Vec<f64> = (0..bag.n)
        .map(|i| {
            bag.row(i)
                .iter()
                .zip(direction)
                .map(|(&x, &u)| x.as_f64() * u)
                .sum::<f64>()
        })
        .collect();
    projections.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = k.min(projections.len());
    projections[..k].iter().sum::<f64>() / k as f64
}
