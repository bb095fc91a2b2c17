//! Named parameter store, Adam updates, and the finite-difference gradient
//! oracle used throughout the test suites.

use std::collections::BTreeMap;

use super::core::{NoGradGuard, Tensor};
use super::scalar::Scalar;
use crate::error::{Error, Result};

struct ParamState<T: Scalar> {
    tensor: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Adam hyperparameters. `weight_decay` is applied as additive L2 on the
/// gradient (classic Adam-with-L2, not decoupled).
#[derive(Clone, Copy, Debug)]
pub struct AdamParams<T: Scalar> {
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamParams<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        AdamParams {
            lr,
            weight_decay,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

/// Collection of named parameter tensors with per-parameter Adam state.
/// Iteration order is lexicographic by name, so update order is deterministic
/// regardless of registration order.
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, ParamState<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    /// Register a parameter tensor under `name`. The store shares the tensor
    /// with the model; updates are visible to both.
    pub fn register(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if !tensor.requires_grad() {
            return Err(Error::State(format!("parameter '{name}' does not require gradients")));
        }
        if self.params.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name '{name}'")));
        }
        let n = tensor.numel();
        self.params.insert(
            name.to_string(),
            ParamState { tensor, m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_coords(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.params.values() {
            p.tensor.zero_grad();
        }
    }

    /// Copy out all parameter values, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<T>> {
        self.params.iter().map(|(k, p)| (k.clone(), p.tensor.to_vec())).collect()
    }

    /// Restore values from a snapshot taken on an identically shaped store.
    pub fn restore(&self, snap: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, values) in snap {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::State(format!("snapshot parameter '{name}' not in store")))?;
            p.tensor.set_data(values)?;
        }
        Ok(())
    }

    /// One Adam step with bias correction over all parameters. Every
    /// parameter must have a populated gradient.
    pub fn adam_step(&mut self, hp: AdamParams<T>) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::State(format!("missing gradient for parameter '{name}'")))?;
            p.step += 1;
            let t = p.step;
            let bc1 = T::one() - hp.beta1.powi(t as i32);
            let bc2 = T::one() - hp.beta2.powi(t as i32);
            p.tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i] + hp.weight_decay * data[i];
                    p.m[i] = hp.beta1 * p.m[i] + (T::one() - hp.beta1) * g;
                    p.v[i] = hp.beta2 * p.v[i] + (T::one() - hp.beta2) * g * g;
                    let m_hat = p.m[i] / bc1;
                    let v_hat = p.v[i] / bc2;
                    data[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
                }
            });
        }
        Ok(())
    }
}

/// Result of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Worst relative error over all parameter coordinates.
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub coords_checked: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every coordinate of every parameter in the
/// store. Relative error uses a small floor so near-zero gradients do not
/// blow up the ratio: |a-n| / max(|a|, |n|, 1e-6).
pub fn finite_diff_check<T, F>(store: &ParamStore<T>, h: T, f: F) -> Result<FdReport>
where
    T: Scalar,
    F: Fn() -> Result<Tensor<T>>,
{
    if h <= T::zero() {
        return Err(Error::Config("finite_diff_check: step h must be positive".into()));
    }
    store.zero_grad();
    let loss = f()?;
    loss.backward()?;

    let analytic: BTreeMap<String, Vec<T>> = store
        .params
        .iter()
        .map(|(k, p)| {
            let g = p.tensor.grad().unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
            (k.clone(), g)
        })
        .collect();

    let guard = NoGradGuard::new();
    let mut report = FdReport { max_rel_error: 0.0, worst: (String::new(), 0), coords_checked: 0 };
    let floor = 1e-6f64;
    for (name, p) in store.params.iter() {
        let original = p.tensor.to_vec();
        for i in 0..original.len() {
            let mut bumped = original.clone();
            bumped[i] = original[i] + h;
            p.tensor.set_data(&bumped)?;
            let plus = f()?.item()?.as_f64();
            bumped[i] = original[i] - h;
            p.tensor.set_data(&bumped)?;
            let minus = f()?.item()?.as_f64();
            p.tensor.set_data(&original)?;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite probe at {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * h.as_f64());
            let a = analytic[name][i].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
        }
    }
    drop(guard);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, vals) in names {
            let t = Tensor::param(&[vals.len()], vals.clone()).unwrap();
            store.register(name, t).unwrap();
        }
        store
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        let mut store = store_with(&[("theta", vec![0.0])]);
        let t = store.get("theta").unwrap().clone();
        // seed gradient g = 1 by hand: loss = theta * 1
        let one = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let loss = t.mul(&one).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        store.adam_step(AdamParams::new(1e-4, 0.0)).unwrap();
        let theta = store.get("theta").unwrap().to_vec()[0];
        // m_hat = 1, v_hat = 1 -> step = -lr / (1 + eps)
        assert!((theta + 1e-4).abs() < 1e-10, "theta = {theta}");
    }

    #[test]
    fn adam_zero_grad_zero_decay_is_identity() {
        let mut store = store_with(&[("w", vec![0.7, -0.3])]);
        let t = store.get("w").unwrap().clone();
        let zero = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let loss = t.mul(&zero).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        store.adam_step(AdamParams::new(1e-2, 0.0)).unwrap();
        assert_eq!(store.get("w").unwrap().to_vec(), vec![0.7, -0.3]);
    }

    #[test]
    fn adam_is_per_parameter_and_order_independent() {
        let run = |order_flip: bool| -> (Vec<f64>, Vec<f64>) {
            let mut store = ParamStore::new();
            let a = Tensor::param(&[1], vec![0.5]).unwrap();
            let b = Tensor::param(&[1], vec![-0.25]).unwrap();
            if order_flip {
                store.register("b", b.clone()).unwrap();
                store.register("a", a.clone()).unwrap();
            } else {
                store.register("a", a.clone()).unwrap();
                store.register("b", b.clone()).unwrap();
            }
            let loss = a.mul(&a).unwrap().sum_all().unwrap().add(&b.mul(&b).unwrap().sum_all().unwrap()).unwrap();
            loss.backward().unwrap();
            store.adam_step(AdamParams::new(1e-3, 0.0)).unwrap();
            (store.get("a").unwrap().to_vec(), store.get("b").unwrap().to_vec())
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn adam_missing_gradient_is_a_state_error() {
        let mut store = store_with(&[("w", vec![1.0])]);
        let err = store.adam_step(AdamParams::new(1e-3, 0.0)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn finite_diff_quadratic() {
        let store = store_with(&[("theta", vec![0.3, -1.2, 2.0])]);
        let t = store.get("theta").unwrap().clone();
        let f = move || t.mul(&t)?.sum_all();
        let report = finite_diff_check(&store, 1e-5, f).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn matmul_tanh_and_cross_entropy_gradients_within_1e6() {
        // linear/smooth probes hold to a tighter tolerance than the generic 1e-4
        let mut store = ParamStore::new();
        let a = Tensor::param(&[2, 3], vec![0.3, -0.7, 1.1, 0.6, -0.2, 0.9]).unwrap();
        let b = Tensor::param(&[3, 2], vec![-0.4, 0.8, 0.1, -0.9, 0.5, 0.2]).unwrap();
        store.register("a", a.clone()).unwrap();
        store.register("b", b.clone()).unwrap();
        let report = finite_diff_check(&store, 1e-5, move || a.matmul(&b)?.sum_all()).unwrap();
        assert!(report.max_rel_error < 1e-6, "matmul: {report:?}");

        let mut store = ParamStore::new();
        let x = Tensor::param(&[4], vec![0.25, -1.3, 0.8, 2.1]).unwrap();
        store.register("x", x.clone()).unwrap();
        let report = finite_diff_check(&store, 1e-5, move || x.tanh()?.sum_all()).unwrap();
        assert!(report.max_rel_error < 1e-6, "tanh: {report:?}");

        let mut store = ParamStore::new();
        let logits = Tensor::param(&[3], vec![0.4, -0.9, 1.7]).unwrap();
        store.register("logits", logits.clone()).unwrap();
        let report = finite_diff_check(&store, 1e-5, move || logits.cross_entropy_logits(2)).unwrap();
        assert!(report.max_rel_error < 1e-6, "cross_entropy: {report:?}");
    }

    #[test]
    fn finite_diff_constant_function() {
        let store = store_with(&[("theta", vec![0.4, 0.6])]);
        let t = store.get("theta").unwrap().clone();
        // f = sum(theta * 0) is constant; gradients should be ~0
        let zero = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let f = move || t.mul(&zero)?.sum_all();
        let report = finite_diff_check(&store, 1e-5, f).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
