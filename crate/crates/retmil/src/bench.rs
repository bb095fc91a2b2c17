//! Scaling benchmark: forward latency, throughput, and peak tensor-allocator
//! bytes versus sequence length, for streaming-mode retention and for a
//! softmax self-attention baseline of matching width.
//!
//! The retention pipeline touches one subsequence at a time and keeps only
//! pooled vectors, so its peak memory is nearly flat in N. The baseline
//! materializes an N x N score matrix per head, so its peak grows
//! quadratically. Latency is wall-clock and machine-dependent; peak bytes are
//! deterministic for a fixed configuration.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pooling::{pool, GatedPoolParams};
use crate::tensor::{meter, NoGradGuard, Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Sequence lengths, ascending.
    pub lengths: Vec<usize>,
    /// Timed repeats per point (median reported).
    pub repeats: usize,
    /// Untimed warmup runs per point.
    pub warmups: usize,
    pub d: usize,
    pub heads: usize,
    pub subseq_len: usize,
    pub pool_hidden: usize,
    pub seed: u64,
    /// Points whose estimated allocation exceeds this budget are recorded as
    /// failed instead of attempted.
    pub mem_budget_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![2048, 4096, 8192, 16384, 32768],
            repeats: 5,
            warmups: 2,
            d: 64,
            heads: 4,
            subseq_len: 64,
            pool_hidden: 128,
            seed: 0,
            mem_budget_bytes: 6 * 1024 * 1024 * 1024,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() {
            return Err(Error::Config("bench: no sequence lengths".into()));
        }
        if !self.lengths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("bench: lengths must be strictly ascending".into()));
        }
        if self.repeats < 3 {
            return Err(Error::Config(format!("bench: repeats {} < 3", self.repeats)));
        }
        Ok(())
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.d,
            heads: self.heads,
            subseq_len: self.subseq_len,
            pool_hidden: self.pool_hidden,
            ..Default::default()
        }
    }
}

/// One measured point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: String,
    pub n_tokens: usize,
    pub latency_ms_median: f64,
    pub throughput_tokens_per_s: f64,
    pub peak_bytes: u64,
}

/// A point that was skipped rather than crashed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailedPoint {
    pub method: String,
    pub n_tokens: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSummary {
    pub records: Vec<BenchRecord>,
    pub failed: Vec<FailedPoint>,
    pub environment: EnvInfo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub precision: String,
    pub caveat: String,
}

pub fn env_info<T: Scalar>() -> EnvInfo {
    EnvInfo {
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        precision: T::NAME.to_string(),
        caveat: "single worker; wall-clock latency varies with CPU frequency scaling".to_string(),
    }
}

fn random_sequence<T: Scalar>(n: usize, d: usize, seed: u64) -> FeatureSequence<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = (0..n * d).map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0)).collect();
    FeatureSequence::new(n, d, data).expect("benchmark input is valid")
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    }
}

fn measure<F>(method: &str, n: usize, repeats: usize, warmups: usize, mut run: F) -> Result<BenchRecord>
where
    F: FnMut() -> Result<()>,
{
    for _ in 0..warmups {
        run()?;
    }
    let mut latencies = Vec::with_capacity(repeats);
    let mut peak = 0u64;
    for _ in 0..repeats {
        let baseline = meter::snapshot().current_bytes;
        meter::reset_peak();
        let start = Instant::now();
        run()?;
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
        peak = meter::snapshot().peak_bytes.saturating_sub(baseline);
    }
    let latency_ms = median(latencies);
    Ok(BenchRecord {
        method: method.to_string(),
        n_tokens: n,
        latency_ms_median: latency_ms,
        throughput_tokens_per_s: n as f64 / (latency_ms / 1e3),
        peak_bytes: peak,
    })
}

/// Streaming-mode RetMIL forward (split -> hierarchy -> logits) per length.
pub fn bench_retmil<T: Scalar>(cfg: &BenchConfig) -> Result<(Vec<BenchRecord>, Vec<FailedPoint>)> {
    cfg.validate()?;
    let model = Model::<T>::init(cfg.model_config(), cfg.seed)?;
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (i, &n) in cfg.lengths.iter().enumerate() {
        let seq = random_sequence::<T>(n, cfg.d, cfg.seed.wrapping_add(i as u64));
        match measure("retention_streaming", n, cfg.repeats, cfg.warmups, || {
            model.forward_streaming(&seq).map(|_| ())
        }) {
            Ok(rec) => records.push(rec),
            Err(e) => failed.push(FailedPoint { method: "retention_streaming".into(), n_tokens: n, reason: e.to_string() }),
        }
    }
    Ok((records, failed))
}

/// Single softmax self-attention layer (full N x N scores per head) with the
/// same gated pooling head and classifier, metered identically.
pub struct BaselineAttention<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub pool: GatedPoolParams<T>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> BaselineAttention<T> {
    pub fn init(d: usize, heads: usize, pool_hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("baseline: dim {d} not divisible by {heads} heads")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(BaselineAttention {
            w_q: Tensor::xavier_uniform(d, d, &mut rng)?,
            w_k: Tensor::xavier_uniform(d, d, &mut rng)?,
            w_v: Tensor::xavier_uniform(d, d, &mut rng)?,
            w_out: Tensor::xavier_uniform(d, d, &mut rng)?,
            pool: GatedPoolParams::init(pool_hidden, d, &mut rng)?,
            classifier_w: Tensor::xavier_uniform(num_classes, d, &mut rng)?,
            classifier_b: Tensor::param(&[num_classes], vec![T::zero(); num_classes])?,
            heads,
        })
    }

    /// Forward to logits. Inference-only: softmax runs in place on the score
    /// matrix so one N x N buffer is live per head rather than two.
    pub fn forward(&self, seq: &FeatureSequence<T>) -> Result<Tensor<T>> {
        let _guard = NoGradGuard::new();
        let d = self.w_q.shape()[0];
        if seq.d != d {
            return Err(Error::Config(format!("baseline: sequence d={} vs model {d}", seq.d)));
        }
        let x = Tensor::from_vec(&[seq.n, seq.d], seq.values().to_vec())?;
        let q = x.matmul(&self.w_q)?;
        let k = x.matmul(&self.w_k)?;
        let v = x.matmul(&self.w_v)?;
        let dh = d / self.heads;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?.scale(scale)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?;
            softmax_rows_inplace(&scores)?;
            head_outs.push(scores.matmul(&vh)?);
        }
        let concat = Tensor::concat_cols(&head_outs)?;
        drop(head_outs);
        let out = concat.matmul(&self.w_out)?;
        let (pooled, _weights) = pool(&out, &self.pool)?;
        self.classifier_w
            .matmul(&pooled.reshape(&[d, 1])?)?
            .reshape(&[self.classifier_b.numel()])?
            .add(&self.classifier_b)
    }
}

/// Row softmax computed in place. Only valid on tensors outside any gradient
/// graph; the benchmark baseline uses it to halve its transient footprint.
fn softmax_rows_inplace<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    if t.requires_grad() {
        return Err(Error::State("in-place softmax on a gradient-tracked tensor".into()));
    }
    let width = *t.shape().last().unwrap();
    let mut finite = true;
    t.update_data(|data| {
        for row in data.chunks_mut(width) {
            let mut max = row[0];
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
                finite &= v.is_finite();
            }
        }
    });
    if finite {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "softmax_inplace" })
    }
}

/// Conservative allocation estimate for one baseline forward at length n.
fn baseline_bytes_estimate<T: Scalar>(n: usize, d: usize) -> u64 {
    let elem = std::mem::size_of::<T>() as u64;
    let nn = (n as u64) * (n as u64);
    let proj = 4 * (n as u64) * (d as u64);
    (nn + 2 * proj + nn / 8) * elem
}

pub fn bench_softmax_baseline<T: Scalar>(cfg: &BenchConfig) -> Result<(Vec<BenchRecord>, Vec<FailedPoint>)> {
    cfg.validate()?;
    let model = BaselineAttention::<T>::init(cfg.d, cfg.heads, cfg.pool_hidden, 2, cfg.seed)?;
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (i, &n) in cfg.lengths.iter().enumerate() {
        let estimate = baseline_bytes_estimate::<T>(n, cfg.d);
        if estimate > cfg.mem_budget_bytes {
            failed.push(FailedPoint {
                method: "softmax_attention".into(),
                n_tokens: n,
                reason: format!("estimated {estimate} bytes exceeds budget {}", cfg.mem_budget_bytes),
            });
            continue;
        }
        let seq = random_sequence::<T>(n, cfg.d, cfg.seed.wrapping_add(i as u64));
        match measure("softmax_attention", n, cfg.repeats, cfg.warmups, || model.forward(&seq).map(|_| ())) {
            Ok(rec) => records.push(rec),
            Err(e) => failed.push(FailedPoint { method: "softmax_attention".into(), n_tokens: n, reason: e.to_string() }),
        }
    }
    Ok((records, failed))
}

pub const BENCH_CSV_HEADER: &str = "method,n_tokens,latency_ms_median,throughput_tokens_per_s,peak_bytes";

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.n_tokens, r.latency_ms_median, r.throughput_tokens_per_s, r.peak_bytes
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Input("empty bench csv".into()))?;
    if header != BENCH_CSV_HEADER {
        return Err(Error::Input(format!("unexpected bench csv header '{header}'")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Input(format!("bench csv line {}: {} fields", lineno + 2, fields.len())));
        }
        let parse_err = |what: &str| Error::Input(format!("bench csv line {}: bad {what}", lineno + 2));
        records.push(BenchRecord {
            method: fields[0].to_string(),
            n_tokens: fields[1].parse().map_err(|_| parse_err("n_tokens"))?,
            latency_ms_median: fields[2].parse().map_err(|_| parse_err("latency"))?,
            throughput_tokens_per_s: fields[3].parse().map_err(|_| parse_err("throughput"))?,
            peak_bytes: fields[4].parse().map_err(|_| parse_err("peak_bytes"))?,
        });
    }
    Ok(records)
}
