//! Self-check suites run by `retmil check`: recurrent-form equivalence,
//! causality, gradient checks, and the padding sweep. Each check returns a
//! named pass/fail outcome; the CLI prints one line per check and exits
//! nonzero if any fails.
//!
//! A fault can be injected to validate that the checks actually detect
//! breakage (currently: using a transposed decay matrix in the parallel
//! retention path, which violates causality).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureSequence;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::retention::{decay_matrix, MsrLayer, RetentionConfig};
use crate::sequencer::compute_provenance;
use crate::tensor::{finite_diff_check, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        CheckOutcome { name, passed: true, detail: detail.into() }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        CheckOutcome { name, passed: false, detail: detail.into() }
    }

    fn from_result(name: &'static str, res: Result<(bool, String)>) -> Self {
        match res {
            Ok((true, detail)) => Self::pass(name, detail),
            Ok((false, detail)) => Self::fail(name, detail),
            Err(e) => Self::fail(name, format!("errored: {e}")),
        }
    }
}

/// Deliberate breakage for exercising the failure paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Replace D with its transpose in the parallel retention path.
    DecayTranspose,
}

impl std::str::FromStr for Fault {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decay-transpose" => Ok(Fault::DecayTranspose),
            other => Err(crate::error::Error::Input(format!("unknown fault '{other}' (expected decay-transpose)"))),
        }
    }
}

fn parallel_head<T: Scalar>(layer: &MsrLayer<T>, h: usize, x: &Tensor<T>, fault: Option<Fault>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let decay = decay_matrix(layer.config.gammas[h], n)?;
    match fault {
        Some(Fault::DecayTranspose) => layer.retention_parallel_with_decay(h, x, &decay.tensor().transpose()?),
        None => layer.retention_parallel_with_decay(h, x, decay.tensor()),
    }
}

fn random_layer<T: Scalar>(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<MsrLayer<T>> {
    let cfg = RetentionConfig::new(dim, heads)?;
    MsrLayer::init(cfg, rng)
}

fn random_matrix<T: Scalar>(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let data: Vec<T> = (0..n * d).map(|_| T::from_f64(rng.gen::<f64>() * 2.0 - 1.0)).collect();
    Tensor::from_vec(&[n, d], data)
}

/// Parallel vs recurrent retention over randomized shapes.
pub fn check_recurrent_equivalence<T: Scalar>(cases: usize, tol: f64, seed: u64, fault: Option<Fault>) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for case in 0..cases {
            let heads = rng.gen_range(1..=4);
            let dh = 2 * rng.gen_range(1..=8);
            let dim = heads * dh;
            let n = rng.gen_range(1..=64);
            let layer = random_layer::<T>(dim, heads, &mut rng)?;
            let x = random_matrix::<T>(n, dim, &mut rng)?;
            for h in 0..heads {
                let p = parallel_head(&layer, h, &x, fault)?.to_vec();
                let r = layer.retention_recurrent(h, &x)?.to_vec();
                let max = p
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                    .fold(0.0f64, f64::max);
                if max > worst {
                    worst = max;
                }
                if worst > tol {
                    return Ok((false, format!("case {case} head {h}: |parallel - recurrent| = {worst:.3e} > {tol:.0e}")));
                }
            }
        }
        Ok((true, format!("{cases} cases, max |parallel - recurrent| = {worst:.3e} <= {tol:.0e} ({})", T::NAME)))
    };
    CheckOutcome::from_result("recurrent_equivalence", run())
}

/// Perturbing token m must leave retention outputs at positions < m
/// bit-identical.
pub fn check_causality<T: Scalar>(seed: u64, fault: Option<Fault>) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for trial in 0..20 {
            let heads = rng.gen_range(1..=3);
            let dh = 2 * rng.gen_range(1..=6);
            let dim = heads * dh;
            let n = rng.gen_range(2..=48);
            let m = rng.gen_range(1..n);
            let layer = random_layer::<T>(dim, heads, &mut rng)?;
            let x = random_matrix::<T>(n, dim, &mut rng)?;
            let mut altered = x.to_vec();
            for v in &mut altered[m * dim..(m + 1) * dim] {
                *v += T::from_f64(0.5);
            }
            let x2 = Tensor::from_vec(&[n, dim], altered)?;
            for h in 0..heads {
                let a = parallel_head(&layer, h, &x, fault)?.to_vec();
                let b = parallel_head(&layer, h, &x2, fault)?.to_vec();
                if a[..m * dh] != b[..m * dh] {
                    return Ok((
                        false,
                        format!("causality violation: trial {trial} head {h}: outputs before token {m} changed"),
                    ));
                }
            }
        }
        Ok((true, "20 randomized perturbation trials, all prefixes bit-identical".into()))
    };
    CheckOutcome::from_result("causality", run())
}

/// Finite-difference gradient checks: individual ops and the full model.
pub fn check_gradients(seed: u64) -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;

        // representative op chain: matmul + tanh + softmax + group_norm
        let a = Tensor::<f64>::param(&[3, 4], (0..12).map(|_| rng.gen::<f64>() - 0.5).collect())?;
        let b = Tensor::<f64>::param(&[4, 4], (0..16).map(|_| rng.gen::<f64>() - 0.5).collect())?;
        let gain = Tensor::<f64>::param(&[4], vec![1.0; 4])?;
        let bias = Tensor::<f64>::param(&[4], vec![0.0; 4])?;
        let mut store = ParamStore::new();
        store.register("a", a.clone())?;
        store.register("b", b.clone())?;
        store.register("gain", gain.clone())?;
        store.register("bias", bias.clone())?;
        let report = finite_diff_check(&store, 1e-5, move || {
            a.matmul(&b)?
                .tanh()?
                .group_norm(2, 1e-5, &gain, &bias)?
                .softmax_rows()?
                .mul(&a)?
                .sum_all()
        })?;
        worst = worst.max(report.max_rel_error);

        // full model on a tiny configuration
        let cfg = ModelConfig { dim: 8, heads: 2, subseq_len: 4, pool_hidden: 6, num_classes: 2, ..Default::default() };
        let model = Model::<f64>::init(cfg, seed)?;
        let store = model.param_store()?;
        let data: Vec<f64> = (0..10 * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let seq = FeatureSequence::new(10, 8, data)?;
        let report = finite_diff_check(&store, 1e-5, move || {
            model.forward(&seq)?.logits.cross_entropy_logits(1)
        })?;
        worst = worst.max(report.max_rel_error);

        Ok((worst < 1e-4, format!("max relative gradient error {worst:.3e} (tolerance 1e-4)")))
    };
    CheckOutcome::from_result("gradient_check", run())
}

/// Split invariants over a quick sweep (the acceptance suite covers the full
/// range up to N = 2048).
pub fn check_padding_sweep() -> CheckOutcome {
    let run = || -> Result<(bool, String)> {
        let mut checked = 0usize;
        for l in [2usize, 4, 8, 512] {
            for n in 1..=256 {
                let p = compute_provenance(n, l)?;
                let q = n / l;
                let r = n % l;
                let mut counts = vec![0usize; n];
                for row in &p.rows {
                    if row.len() != l {
                        return Ok((false, format!("N={n} l={l}: row length {} != {l}", row.len())));
                    }
                    for &t in row {
                        counts[t] += 1;
                    }
                }
                for (t, &c) in counts.iter().enumerate() {
                    if t < q * l && c != 1 {
                        return Ok((false, format!("N={n} l={l}: block token {t} appears {c} times")));
                    }
                    if c == 0 {
                        return Ok((false, format!("N={n} l={l}: token {t} missing")));
                    }
                }
                for row in &p.rows[..p.num_rows().saturating_sub(1)] {
                    if row.iter().any(|&t| t >= q * l) {
                        return Ok((false, format!("N={n} l={l}: remainder token outside last row")));
                    }
                }
                if r > 0 && 2 * r < l {
                    let a = (l - r) / r;
                    let b = (l - r) % r;
                    if r + a * r + b != l {
                        return Ok((false, format!("N={n} l={l}: length identity violated")));
                    }
                }
                checked += 1;
            }
        }
        Ok((true, format!("{checked} (N, l) pairs verified")))
    };
    CheckOutcome::from_result("padding_sweep", run())
}

/// The whole suite, in a fixed order.
pub fn run_all(fault: Option<Fault>) -> Vec<CheckOutcome> {
    vec![
        check_recurrent_equivalence::<f64>(200, 1e-10, 17, fault),
        check_recurrent_equivalence::<f32>(200, 1e-3, 18, fault),
        check_causality::<f64>(19, fault),
        check_gradients(20),
        check_padding_sweep(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_all_checks() {
        let outcomes = run_all(None);
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn decay_transpose_fault_is_detected_as_causality_violation() {
        let outcomes = run_all(Some(Fault::DecayTranspose));
        let causality = outcomes.iter().find(|o| o.name == "causality").unwrap();
        assert!(!causality.passed);
        assert!(causality.detail.contains("causality violation"), "{}", causality.detail);
        let equivalence = outcomes.iter().find(|o| o.name == "recurrent_equivalence").unwrap();
        assert!(!equivalence.passed);
    }
}
