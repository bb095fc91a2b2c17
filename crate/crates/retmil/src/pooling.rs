//! Gated attention pooling: convex aggregation of a feature matrix with
//! weights `softmax(Gamma * (tanh(W f) ⊙ sigm(U f)))`. Used once per
//! subsequence at the local level and once over subsequence embeddings at
//! the global level, with independent parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

/// Parameters of one gated pooling layer: `Gamma` is `[1, M]`, `W` and `U`
/// are `[M, d]`. No bias terms.
pub struct GatedPoolParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub w: Tensor<T>,
    pub u: Tensor<T>,
}

impl<T: Scalar> GatedPoolParams<T> {
    pub fn init(hidden: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 || dim == 0 {
            return Err(Error::Config("pooling: hidden and dim must be positive".into()));
        }
        Ok(GatedPoolParams {
            gamma: Tensor::xavier_uniform(1, hidden, rng)?,
            w: Tensor::xavier_uniform(hidden, dim, rng)?,
            u: Tensor::xavier_uniform(hidden, dim, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.gamma.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn register_params(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.register(&format!("{prefix}.gamma"), self.gamma.clone())?;
        store.register(&format!("{prefix}.w"), self.w.clone())?;
        store.register(&format!("{prefix}.u"), self.u.clone())?;
        Ok(())
    }

    fn check_input(&self, f: &Tensor<T>) -> Result<usize> {
        let s = f.shape();
        if s.len() != 2 || s[1] != self.dim() {
            return Err(Error::Input(format!("pooling input shape {s:?} does not match dim {}", self.dim())));
        }
        Ok(s[0])
    }
}

/// Attention weights over the `n` rows of `f`: a probability vector.
pub fn gated_attention_weights<T: Scalar>(f: &Tensor<T>, params: &GatedPoolParams<T>) -> Result<Tensor<T>> {
    let n = params.check_input(f)?;
    let pre = f.matmul(&params.w.transpose()?)?.tanh()?; // [n, M]
    let gate = f.matmul(&params.u.transpose()?)?.sigmoid()?; // [n, M]
    let scores = pre.mul(&gate)?.matmul(&params.gamma.transpose()?)?; // [n, 1]
    scores.reshape(&[n])?.softmax_rows()
}

/// Pooled feature `sum_k weight_k * f_k` plus the weights themselves.
pub fn pool<T: Scalar>(f: &Tensor<T>, params: &GatedPoolParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = params.check_input(f)?;
    let weights = gated_attention_weights(f, params)?;
    let pooled = weights.reshape(&[1, n])?.matmul(f)?.reshape(&[params.dim()])?;
    Ok((pooled, weights))
}

/// Same pooling computed row by row with constant scratch instead of `[n, M]`
/// intermediates. Forward-only; the streaming pipeline uses it where n grows
/// with the input. Returns plain buffers rather than tensors.
pub fn pool_streaming<T: Scalar>(f: &Tensor<T>, params: &GatedPoolParams<T>) -> Result<(Vec<T>, Vec<T>)> {
    let n = params.check_input(f)?;
    let d = params.dim();
    let m = params.hidden();
    let fd = f.data();
    let gd = params.gamma.data();
    let wd = params.w.data();
    let ud = params.u.data();

    let mut scores = Vec::with_capacity(n);
    for k in 0..n {
        let row = &fd[k * d..(k + 1) * d];
        let mut s = T::zero();
        for i in 0..m {
            let mut wf = T::zero();
            let mut uf = T::zero();
            let wrow = &wd[i * d..(i + 1) * d];
            let urow = &ud[i * d..(i + 1) * d];
            for j in 0..d {
                wf += wrow[j] * row[j];
                uf += urow[j] * row[j];
            }
            let sig = T::one() / (T::one() + (-uf).exp());
            s += gd[i] * wf.tanh() * sig;
        }
        s.is_finite().then_some(()).ok_or(Error::NonFinite { op: "pool_streaming" })?;
        scores.push(s);
    }

    let mut max = scores[0];
    for &s in &scores {
        if s > max {
            max = s;
        }
    }
    let mut total = T::zero();
    for s in &mut scores {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in &mut scores {
        *s = *s / total;
    }

    let mut pooled = vec![T::zero(); d];
    for k in 0..n {
        let w = scores[k];
        let row = &fd[k * d..(k + 1) * d];
        for j in 0..d {
            pooled[j] += w * row[j];
        }
    }
    Ok((pooled, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(hidden: usize, dim: usize, seed: u64) -> GatedPoolParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GatedPoolParams::init(hidden, dim, &mut rng).unwrap()
    }

    fn random_f(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn singleton_weight_is_one_and_pool_is_identity() {
        let p = params(5, 3, 1);
        let f = random_f(1, 3, 2);
        let (pooled, weights) = pool(&f, &p).unwrap();
        assert_eq!(weights.to_vec(), vec![1.0]);
        assert_eq!(pooled.to_vec(), f.to_vec());
    }

    #[test]
    fn identical_rows_share_weight() {
        let p = params(4, 3, 3);
        let row = [0.4, -1.0, 2.0];
        let f = Tensor::from_vec(&[2, 3], [row, row].concat()).unwrap();
        let (pooled, weights) = pool(&f, &p).unwrap();
        let w = weights.to_vec();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        for (out, expect) in pooled.to_vec().iter().zip(row) {
            assert!((out - expect).abs() < 1e-12);
        }
    }

    /// Scalar re-implementation of the gating formula, independent of the
    /// tensor path.
    fn scalar_weights(f: &Tensor<f64>, p: &GatedPoolParams<f64>) -> Vec<f64> {
        let (n, d) = (f.shape()[0], f.shape()[1]);
        let m = p.hidden();
        let fd = f.to_vec();
        let (gd, wd, ud) = (p.gamma.to_vec(), p.w.to_vec(), p.u.to_vec());
        let mut scores = Vec::with_capacity(n);
        for k in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                let mut wf = 0.0;
                let mut uf = 0.0;
                for j in 0..d {
                    wf += wd[i * d + j] * fd[k * d + j];
                    uf += ud[i * d + j] * fd[k * d + j];
                }
                s += gd[i] * (wf.tanh() * (1.0 / (1.0 + (-uf).exp())));
            }
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    #[test]
    fn weights_match_scalar_reimplementation() {
        let p = params(5, 8, 7);
        let f = random_f(4, 8, 8);
        let ours = gated_attention_weights(&f, &p).unwrap().to_vec();
        let reference = scalar_weights(&f, &p);
        for (a, b) in ours.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_are_a_probability_vector() {
        let p = params(6, 5, 11);
        let f = random_f(9, 5, 12);
        let w = gated_attention_weights(&f, &p).unwrap().to_vec();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn pooled_feature_stays_in_the_convex_hull() {
        let p = params(4, 6, 13);
        let f = random_f(7, 6, 14);
        let (pooled, _) = pool(&f, &p).unwrap();
        let fd = f.to_vec();
        for (j, &out) in pooled.to_vec().iter().enumerate() {
            let col: Vec<f64> = (0..7).map(|k| fd[k * 6 + j]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(out >= lo - 1e-12 && out <= hi + 1e-12, "coordinate {j} escaped [{lo}, {hi}]");
        }
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let p = params(5, 4, 15);
        let f = random_f(5, 4, 16);
        let perm = [3usize, 0, 4, 1, 2];
        let fd = f.to_vec();
        let permuted: Vec<f64> = perm.iter().flat_map(|&k| fd[k * 4..(k + 1) * 4].to_vec()).collect();
        let f2 = Tensor::from_vec(&[5, 4], permuted).unwrap();

        let w1 = gated_attention_weights(&f, &p).unwrap().to_vec();
        let w2 = gated_attention_weights(&f2, &p).unwrap().to_vec();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(w2[slot], w1[src], "weight moved inexactly");
        }
    }

    #[test]
    fn streaming_pool_matches_tensor_path() {
        let p = params(6, 8, 23);
        let f = random_f(11, 8, 24);
        let (pooled_t, weights_t) = pool(&f, &p).unwrap();
        let (pooled_s, weights_s) = pool_streaming(&f, &p).unwrap();
        for (a, b) in pooled_t.to_vec().iter().zip(&pooled_s) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in weights_t.to_vec().iter().zip(&weights_s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_gradient_check() {
        let p = params(4, 5, 17);
        let f = Tensor::param(&[3, 5], random_f(3, 5, 18).to_vec()).unwrap();
        let mut store = ParamStore::new();
        p.register_params(&mut store, "pool").unwrap();
        store.register("f", f.clone()).unwrap();
        // ||pool(F)||^2 as the probe scalar
        let report = finite_diff_check(&store, 1e-5, move || {
            let (pooled, _) = pool(&f, &p)?;
            pooled.mul(&pooled)?.sum_all()
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn empty_input_is_rejected() {
        let p = params(4, 5, 19);
        assert!(Tensor::<f64>::zeros(&[0, 5]).is_err());
        let bad = random_f(2, 4, 20);
        assert!(pool(&bad, &p).is_err());
    }
}
