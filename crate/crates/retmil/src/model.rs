//! The full hierarchical pipeline: split into subsequences, local retention,
//! local gated pooling, global retention over subsequence embeddings, global
//! pooling, linear classifier. Also: token attention-score extraction,
//! prediction, the training loop, and checkpoint I/O.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use train::{train, write_history_csv, EpochRecord, TrainConfig, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::pooling::{pool, pool_streaming, GatedPoolParams};
use crate::retention::{MsrLayer, RetentionConfig, RetentionMode};
use crate::sequencer::{compute_provenance, gather_row, provenance_scatter, Provenance};
use crate::tensor::{NoGradGuard, ParamStore, Scalar, Tensor};

/// Architecture hyperparameters. Defaults are the desk-scale configuration;
/// a full-scale variant (d=384, l=512) is reachable through a config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub subseq_len: usize,
    pub pool_hidden: usize,
    pub num_classes: usize,
    pub rope_base: f64,
    pub gn_eps: f64,
    /// Per-head decay override; `None` selects 1 - 2^(-5-h).
    pub gammas: Option<Vec<f64>>,
    pub scale_keys: bool,
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            subseq_len: 64,
            pool_hidden: 128,
            num_classes: 2,
            rope_base: 10000.0,
            gn_eps: 1e-5,
            gammas: None,
            scale_keys: true,
            residual: false,
        }
    }
}

impl ModelConfig {
    pub fn retention_config<T: Scalar>(&self) -> Result<RetentionConfig<T>> {
        let mut cfg = RetentionConfig::new(self.dim, self.heads)?;
        cfg.rope_base = T::from_f64(self.rope_base);
        cfg.gn_eps = T::from_f64(self.gn_eps);
        cfg.scale_keys = self.scale_keys;
        cfg.residual = self.residual;
        if let Some(gammas) = &self.gammas {
            cfg.gammas = gammas.iter().map(|&g| T::from_f64(g)).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.subseq_len < 1 {
            return Err(Error::Config("subseq_len must be >= 1".into()));
        }
        if self.pool_hidden < 1 {
            return Err(Error::Config("pool_hidden must be >= 1".into()));
        }
        self.retention_config::<f64>()?;
        Ok(())
    }
}

/// Everything a forward pass exposes: logits plus both attention levels and
/// the slot provenance needed to scatter scores back onto tokens.
pub struct ForwardTrace<T: Scalar> {
    pub logits: Tensor<T>,
    /// Local pooling weights, one row of length l per subsequence.
    pub alpha: Vec<Vec<T>>,
    /// Global pooling weights over subsequences.
    pub beta: Vec<T>,
    pub provenance: Provenance,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub local_msr: MsrLayer<T>,
    pub local_pool: GatedPoolParams<T>,
    pub global_msr: MsrLayer<T>,
    pub global_pool: GatedPoolParams<T>,
    /// `[C, d]` classifier weight and `[C]` bias — the only biased map.
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let local_msr = MsrLayer::init(config.retention_config()?, &mut rng)?;
        let local_pool = GatedPoolParams::init(config.pool_hidden, config.dim, &mut rng)?;
        let global_msr = MsrLayer::init(config.retention_config()?, &mut rng)?;
        let global_pool = GatedPoolParams::init(config.pool_hidden, config.dim, &mut rng)?;
        let classifier_w = Tensor::xavier_uniform(config.num_classes, config.dim, &mut rng)?;
        let classifier_b = Tensor::param(&[config.num_classes], vec![T::zero(); config.num_classes])?;
        Ok(Model { config, local_msr, local_pool, global_msr, global_pool, classifier_w, classifier_b })
    }

    pub fn param_store(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.local_msr.register_params(&mut store, "local_msr")?;
        self.local_pool.register_params(&mut store, "local_pool")?;
        self.global_msr.register_params(&mut store, "global_msr")?;
        self.global_pool.register_params(&mut store, "global_pool")?;
        store.register("classifier.w", self.classifier_w.clone())?;
        store.register("classifier.b", self.classifier_b.clone())?;
        Ok(store)
    }

    fn check_seq(&self, seq: &FeatureSequence<T>) -> Result<()> {
        if seq.d != self.config.dim {
            return Err(Error::Config(format!("sequence d={} does not match model dim {}", seq.d, self.config.dim)));
        }
        Ok(())
    }

    /// Standard forward pass. Builds the gradient graph when gradients are
    /// enabled, so it is the training path.
    pub fn forward(&self, seq: &FeatureSequence<T>) -> Result<ForwardTrace<T>> {
        self.check_seq(seq)?;
        let provenance = compute_provenance(seq.n, self.config.subseq_len)?;
        let rows: Vec<Tensor<T>> = (0..provenance.num_rows())
            .map(|b| gather_row(seq, &provenance, b))
            .collect::<Result<_>>()?;
        let local_outs = self.local_msr.forward_rows(&rows, RetentionMode::Parallel)?;

        let mut alpha = Vec::with_capacity(local_outs.len());
        let mut pooled = Vec::with_capacity(local_outs.len());
        for out in &local_outs {
            let (feature, weights) = pool(out, &self.local_pool)?;
            alpha.push(weights.to_vec());
            pooled.push(feature);
        }

        let f_local = Tensor::stack_rows(&pooled)?; // [B, d]
        let global_out = self.global_msr.forward_seq(&f_local, RetentionMode::Parallel)?;
        let (f_global, beta_t) = pool(&global_out, &self.global_pool)?;
        let beta = beta_t.to_vec();

        let logits = self
            .classifier_w
            .matmul(&f_global.reshape(&[self.config.dim, 1])?)?
            .reshape(&[self.config.num_classes])?
            .add(&self.classifier_b)?;
        Ok(ForwardTrace { logits, alpha, beta, provenance })
    }

    /// Streaming forward pass (inference/benchmark path): gradients are off,
    /// subsequences are processed one at a time so only the pooled vectors
    /// accumulate, and the global level runs the serial recurrent form.
    pub fn forward_streaming(&self, seq: &FeatureSequence<T>) -> Result<ForwardTrace<T>> {
        let _guard = NoGradGuard::new();
        self.check_seq(seq)?;
        let provenance = compute_provenance(seq.n, self.config.subseq_len)?;

        let mut alpha = Vec::with_capacity(provenance.num_rows());
        let mut pooled = Vec::with_capacity(provenance.num_rows());
        for b in 0..provenance.num_rows() {
            let row = gather_row(seq, &provenance, b)?;
            let out = self.local_msr.forward_seq(&row, RetentionMode::Parallel)?;
            let (feature, weights) = pool(&out, &self.local_pool)?;
            alpha.push(weights.to_vec());
            pooled.push(feature);
        }

        let f_local = Tensor::stack_rows(&pooled)?;
        drop(pooled);
        let global_out = self.global_msr.forward_seq(&f_local, RetentionMode::Recurrent)?;
        drop(f_local);
        let (f_global_buf, beta) = pool_streaming(&global_out, &self.global_pool)?;
        drop(global_out);
        let f_global = Tensor::from_vec(&[self.config.dim], f_global_buf)?;

        let logits = self
            .classifier_w
            .matmul(&f_global.reshape(&[self.config.dim, 1])?)?
            .reshape(&[self.config.num_classes])?
            .add(&self.classifier_b)?;
        Ok(ForwardTrace { logits, alpha, beta, provenance })
    }

    /// Per-token attention scores `alpha_{i,k} * beta_i`, scattered onto the
    /// original tokens (duplicate slots summed). Sums to 1.
    pub fn attention_scores(trace: &ForwardTrace<T>) -> Result<Vec<T>> {
        let l = trace.provenance.subseq_len;
        let mut per_slot = Vec::with_capacity(trace.alpha.len() * l);
        for (row, weights) in trace.alpha.iter().enumerate() {
            let b = trace.beta[row];
            per_slot.extend(weights.iter().map(|&a| a * b));
        }
        provenance_scatter(&trace.provenance, &per_slot)
    }

    /// Class probabilities via softmax; ties broken toward the lowest index.
    pub fn predict(&self, seq: &FeatureSequence<T>) -> Result<(usize, Vec<T>)> {
        let _guard = NoGradGuard::new();
        let trace = self.forward(seq)?;
        let probs = trace.logits.softmax_rows()?.to_vec();
        let mut best = 0usize;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = j;
            }
        }
        Ok((best, probs))
    }
}
