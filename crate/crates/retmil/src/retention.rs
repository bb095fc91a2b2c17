//! Multi-head retention: causal sequence mixing via `(Q̃K̃ᵀ ⊙ D)V` with an
//! exponential-decay lower-triangular matrix D, rotary position encoding on
//! queries and keys, and a GroupNorm + swish-gate output path.
//!
//! Two forms of the same operator are provided: the parallel form used for
//! training (differentiable, O(n^2) work per subsequence) and the serial
//! recurrent form with O(1) state per step. They are algebraically identical,
//! which the test suites exploit as a correctness oracle.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NoGradGuard, ParamStore, Scalar, Tensor};

/// Hyperparameters of one retention layer.
#[derive(Clone, Debug)]
pub struct RetentionConfig<T: Scalar> {
    /// Model width d; heads each see d / heads coordinates.
    pub dim: usize,
    pub heads: usize,
    /// Per-head decay rates in [0, 1). Zero is the degenerate no-history
    /// mode used by tests.
    pub gammas: Vec<T>,
    pub rope_base: T,
    pub gn_eps: T,
    /// Scale keys by 1/sqrt(d_head). Disable to evaluate the literal
    /// unscaled product.
    pub scale_keys: bool,
    /// Add the layer input back onto the gated output. Off by default.
    pub residual: bool,
}

/// Default decay schedule gamma_h = 1 - 2^(-5-h).
pub fn default_gammas<T: Scalar>(heads: usize) -> Vec<T> {
    (0..heads).map(|h| T::from_f64(1.0 - (-5.0 - h as f64).exp2())).collect()
}

impl<T: Scalar> RetentionConfig<T> {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        let cfg = RetentionConfig {
            dim,
            heads,
            gammas: default_gammas(heads),
            rope_base: T::from_f64(10000.0),
            gn_eps: T::from_f64(1e-5),
            scale_keys: true,
            residual: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 {
            return Err(Error::Config("retention: dim and heads must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("retention: dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("retention: head width {} must be even for rope", self.head_dim())));
        }
        if self.gammas.len() != self.heads {
            return Err(Error::Config(format!("retention: {} gammas for {} heads", self.gammas.len(), self.heads)));
        }
        for &g in &self.gammas {
            if !(g >= T::zero() && g < T::one()) {
                return Err(Error::Config(format!("retention: decay {g} outside [0, 1)")));
            }
        }
        if self.rope_base <= T::one() {
            return Err(Error::Config("retention: rope_base must exceed 1".into()));
        }
        if self.gn_eps <= T::zero() {
            return Err(Error::Config("retention: gn_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable parameters of one multi-head retention layer.
pub struct MsrLayer<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_out: Tensor<T>,
    pub gn_gain: Tensor<T>,
    pub gn_bias: Tensor<T>,
    pub config: RetentionConfig<T>,
}

/// Which algebraic form computes the retention mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetentionMode {
    /// `(Q̃K̃ᵀ ⊙ D)V` via dense products; differentiable.
    Parallel,
    /// O(1)-state recurrence `S_t = γS_{t-1} + k̃_tᵀv_t`, `out_t = q̃_tS_t`;
    /// forward-only.
    Recurrent,
}

impl<T: Scalar> MsrLayer<T> {
    /// Xavier-uniform projections, unit gain / zero bias for the norm.
    pub fn init(config: RetentionConfig<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(MsrLayer {
            w_q: Tensor::xavier_uniform(d, d, rng)?,
            w_k: Tensor::xavier_uniform(d, d, rng)?,
            w_v: Tensor::xavier_uniform(d, d, rng)?,
            w_gate: Tensor::xavier_uniform(d, d, rng)?,
            w_out: Tensor::xavier_uniform(d, d, rng)?,
            gn_gain: Tensor::param(&[d], vec![T::one(); d])?,
            gn_bias: Tensor::param(&[d], vec![T::zero(); d])?,
            config,
        })
    }

    pub fn register_params(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.register(&format!("{prefix}.w_q"), self.w_q.clone())?;
        store.register(&format!("{prefix}.w_k"), self.w_k.clone())?;
        store.register(&format!("{prefix}.w_v"), self.w_v.clone())?;
        store.register(&format!("{prefix}.w_gate"), self.w_gate.clone())?;
        store.register(&format!("{prefix}.w_out"), self.w_out.clone())?;
        store.register(&format!("{prefix}.gn_gain"), self.gn_gain.clone())?;
        store.register(&format!("{prefix}.gn_bias"), self.gn_bias.clone())?;
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.config.dim {
            return Err(Error::Config(format!(
                "retention input shape {s:?} does not match layer dim {}",
                self.config.dim
            )));
        }
        Ok(s[0])
    }

    /// Project the whole input once; heads slice out of these.
    fn projections(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        Ok((x.matmul(&self.w_q)?, x.matmul(&self.w_k)?, x.matmul(&self.w_v)?))
    }

    /// Per-head query/key/value with rope applied and keys optionally scaled.
    fn head_inputs(
        &self,
        q_full: &Tensor<T>,
        k_full: &Tensor<T>,
        v_full: &Tensor<T>,
        h: usize,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let dh = self.config.head_dim();
        let n = q_full.shape()[0];
        let positions: Vec<T> = (0..n).map(T::from_usize).collect();
        let q = q_full.slice_cols(h * dh, dh)?.rope(&positions, self.config.rope_base)?;
        let mut k = k_full.slice_cols(h * dh, dh)?;
        if self.config.scale_keys {
            k = k.scale(T::one() / T::from_usize(dh).sqrt())?;
        }
        let k = k.rope(&positions, self.config.rope_base)?;
        let v = v_full.slice_cols(h * dh, dh)?;
        Ok((q, k, v))
    }

    /// Parallel-form retention for head `h` over an `[n, d]` input.
    pub fn retention_parallel(&self, h: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let decay = decay_matrix(self.config.gammas[h], n)?;
        self.retention_parallel_with_decay(h, x, decay.tensor())
    }

    /// Parallel form with an explicit decay matrix. Exists so tests and the
    /// fault-injection harness can substitute a different D.
    pub fn retention_parallel_with_decay(&self, h: usize, x: &Tensor<T>, decay: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (q_full, k_full, v_full) = self.projections(x)?;
        let (q, k, v) = self.head_inputs(&q_full, &k_full, &v_full, h)?;
        let scores = q.matmul(&k.transpose()?)?;
        scores.mul(decay)?.matmul(&v)
    }

    /// Recurrent-form retention for head `h`: identical contract to
    /// [`Self::retention_parallel`], evaluated serially with O(1) state.
    /// Forward-only; never part of a gradient graph.
    pub fn retention_recurrent(&self, h: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let _guard = NoGradGuard::new();
        let n = self.check_input(x)?;
        let (q_full, k_full, v_full) = self.projections(x)?;
        let (q, k, v) = self.head_inputs(&q_full, &k_full, &v_full, h)?;
        let dh = self.config.head_dim();
        let gamma = self.config.gammas[h];

        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        let mut state = vec![T::zero(); dh * dh];
        let mut out = vec![T::zero(); n * dh];
        for t in 0..n {
            let kt = &kd[t * dh..(t + 1) * dh];
            let vt = &vd[t * dh..(t + 1) * dh];
            for i in 0..dh {
                let ki = kt[i];
                let row = &mut state[i * dh..(i + 1) * dh];
                for j in 0..dh {
                    row[j] = gamma * row[j] + ki * vt[j];
                }
            }
            let qt = &qd[t * dh..(t + 1) * dh];
            let ot = &mut out[t * dh..(t + 1) * dh];
            for i in 0..dh {
                let qi = qt[i];
                let row = &state[i * dh..(i + 1) * dh];
                for j in 0..dh {
                    ot[j] += qi * row[j];
                }
            }
        }
        drop(qd);
        drop(kd);
        drop(vd);
        Tensor::from_vec(&[n, dh], out)
    }

    /// Full multi-head retention update of one `[n, d]` sequence: all heads,
    /// concatenation, GroupNorm over head groups, swish gate, output map.
    pub fn forward_seq(&self, x: &Tensor<T>, mode: RetentionMode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut decay_cache: HashMap<(usize, usize), Tensor<T>> = HashMap::new();
        self.forward_seq_cached(x, mode, &mut decay_cache)
    }

    fn forward_seq_cached(
        &self,
        x: &Tensor<T>,
        mode: RetentionMode,
        decay_cache: &mut HashMap<(usize, usize), Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        let heads = self.config.heads;
        let mut head_outs = Vec::with_capacity(heads);
        match mode {
            RetentionMode::Parallel => {
                let (q_full, k_full, v_full) = self.projections(x)?;
                for h in 0..heads {
                    let decay = match decay_cache.get(&(h, n)) {
                        Some(d) => d.clone(),
                        None => {
                            let d = decay_matrix(self.config.gammas[h], n)?.tensor().clone();
                            decay_cache.insert((h, n), d.clone());
                            d
                        }
                    };
                    let (q, k, v) = self.head_inputs(&q_full, &k_full, &v_full, h)?;
                    let scores = q.matmul(&k.transpose()?)?;
                    head_outs.push(scores.mul(&decay)?.matmul(&v)?);
                }
            }
            RetentionMode::Recurrent => {
                return self.forward_seq_recurrent_stream(x);
            }
        }
        let concat = Tensor::concat_cols(&head_outs)?;
        let normed = concat.group_norm(heads, self.config.gn_eps, &self.gn_gain, &self.gn_bias)?;
        let gate = x.matmul(&self.w_gate)?.swish()?;
        let mut out = gate.mul(&normed)?.matmul(&self.w_out)?;
        if self.config.residual {
            out = out.add(x)?;
        }
        Ok(out)
    }

    /// Serial full-layer update: one pass over the rows with O(1) retention
    /// state per head and row-local norm/gate work. Peak allocation is the
    /// `[n, d]` output plus constant scratch, which is what keeps the
    /// streaming pipeline's memory curve flat. Forward-only.
    fn forward_seq_recurrent_stream(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let _guard = NoGradGuard::new();
        let n = x.shape()[0];
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let half = dh / 2;
        let eps = self.config.gn_eps;
        let key_scale = if self.config.scale_keys { T::one() / T::from_usize(dh).sqrt() } else { T::one() };
        let thetas: Vec<T> = (0..half)
            .map(|j| self.config.rope_base.powf(T::from_f64(-2.0 * j as f64 / dh as f64)))
            .collect();

        let xd = x.data();
        let wq = self.w_q.data();
        let wk = self.w_k.data();
        let wv = self.w_v.data();
        let wg = self.w_gate.data();
        let wo = self.w_out.data();
        let gain = self.gn_gain.data();
        let bias = self.gn_bias.data();

        let mut out = vec![T::zero(); n * d];
        let mut states = vec![T::zero(); heads * dh * dh];
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        let mut mixed = vec![T::zero(); d];
        let mut normed = vec![T::zero(); d];
        let mut gate = vec![T::zero(); d];

        for t in 0..n {
            let xt = &xd[t * d..(t + 1) * d];
            matvec(xt, &wq, d, &mut q);
            matvec(xt, &wk, d, &mut k);
            matvec(xt, &wv, d, &mut v);
            let pos = T::from_usize(t);
            for h in 0..heads {
                let off = h * dh;
                for j in 0..half {
                    let angle = pos * thetas[j];
                    let (c, s) = (angle.cos(), angle.sin());
                    let (q0, q1) = (q[off + 2 * j], q[off + 2 * j + 1]);
                    q[off + 2 * j] = q0 * c - q1 * s;
                    q[off + 2 * j + 1] = q0 * s + q1 * c;
                    let (k0, k1) = (k[off + 2 * j] * key_scale, k[off + 2 * j + 1] * key_scale);
                    k[off + 2 * j] = k0 * c - k1 * s;
                    k[off + 2 * j + 1] = k0 * s + k1 * c;
                }
                let gamma = self.config.gammas[h];
                let state = &mut states[h * dh * dh..(h + 1) * dh * dh];
                for i in 0..dh {
                    let ki = k[off + i];
                    let row = &mut state[i * dh..(i + 1) * dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = gamma * *s + ki * v[off + j];
                    }
                }
                let mrow = &mut mixed[off..off + dh];
                mrow.fill(T::zero());
                for i in 0..dh {
                    let qi = q[off + i];
                    let srow = &state[i * dh..(i + 1) * dh];
                    for (j, m) in mrow.iter_mut().enumerate() {
                        *m += qi * srow[j];
                    }
                }
            }
            // GroupNorm over head groups, then swish gate and output map.
            for g in 0..heads {
                let base = g * dh;
                let slice = &mixed[base..base + dh];
                let nf = T::from_usize(dh);
                let mut mean = T::zero();
                for &m in slice {
                    mean += m;
                }
                mean = mean / nf;
                let mut var = T::zero();
                for &m in slice {
                    let c = m - mean;
                    var += c * c;
                }
                var = var / nf;
                let istd = T::one() / (var + eps).sqrt();
                for j in 0..dh {
                    let xhat = (mixed[base + j] - mean) * istd;
                    normed[base + j] = gain[base + j] * xhat + bias[base + j];
                }
            }
            matvec(xt, &wg, d, &mut gate);
            for j in 0..d {
                let s = T::one() / (T::one() + (-gate[j]).exp());
                gate[j] = gate[j] * s * normed[j];
            }
            matvec(&gate, &wo, d, &mut out[t * d..(t + 1) * d]);
            if self.config.residual {
                for j in 0..d {
                    out[t * d + j] += xt[j];
                }
            }
        }
        drop(xd);
        Tensor::from_vec(&[n, d], out)
    }

    /// Batch MSR over independent rows. Results are identical to calling
    /// [`Self::forward_seq`] on each row, by construction.
    pub fn forward_rows(&self, rows: &[Tensor<T>], mode: RetentionMode) -> Result<Vec<Tensor<T>>> {
        let mut decay_cache: HashMap<(usize, usize), Tensor<T>> = HashMap::new();
        rows.iter()
            .map(|x| {
                self.check_input(x)?;
                self.forward_seq_cached(x, mode, &mut decay_cache)
            })
            .collect()
    }

    /// Batch MSR over a `[B, n, d]` stack.
    pub fn msr_forward(&self, batch: &Tensor<T>, mode: RetentionMode) -> Result<Tensor<T>> {
        let s = batch.shape();
        if s.len() != 3 {
            return Err(Error::Config(format!("msr_forward expects [B, n, d], got {s:?}")));
        }
        let rows: Vec<Tensor<T>> = (0..s[0]).map(|b| batch.index_row(b)).collect::<Result<_>>()?;
        let outs = self.forward_rows(&rows, mode)?;
        Tensor::stack_rows(&outs)
    }
}

/// out = x * w for a row-major `[d, d]` matrix, accumulating over rows.
fn matvec<T: Scalar>(x: &[T], w: &[T], d: usize, out: &mut [T]) {
    out.fill(T::zero());
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Lower-triangular decay matrix with entries `gamma^(n-m)` on and below the
/// diagonal and exact zeros above it.
pub struct DecayMatrix<T: Scalar> {
    tensor: Tensor<T>,
    gamma: T,
}

impl<T: Scalar> DecayMatrix<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn n(&self) -> usize {
        self.tensor.shape()[0]
    }
}

/// Build the decay matrix for `gamma` in [0, 1). Gamma zero yields the
/// identity (degenerate no-history mode used in tests).
pub fn decay_matrix<T: Scalar>(gamma: T, n: usize) -> Result<DecayMatrix<T>> {
    if !(gamma >= T::zero() && gamma < T::one()) {
        return Err(Error::Config(format!("decay gamma {gamma} outside [0, 1)")));
    }
    if n == 0 {
        return Err(Error::Config("decay matrix needs n >= 1".into()));
    }
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            data[i * n + j] = gamma.powi((i - j) as i32);
        }
    }
    Ok(DecayMatrix { tensor: Tensor::from_vec(&[n, n], data)?, gamma })
}
