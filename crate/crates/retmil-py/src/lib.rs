//! Python bindings: the RetMIL model plus splitting, metrics, file I/O, and
//! synthetic task generation. All numerics run in f64 (Python's float).
//!
//! Build with `cargo build -p retmil-py --release`; `python/smoke_test.py`
//! shows how to load the resulting extension module.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use retmil::data::{
    self, generate_synthetic, witness_oracle_score, BagRecord, FeatureSequence, Manifest, SplitKind,
    SyntheticTaskConfig,
};
use retmil::model::{
    load_checkpoint, save_checkpoint, train, Model, ModelConfig, TrainConfig,
};
use retmil::retention;
use retmil::sequencer;
use retmil::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_sequence(features: Vec<Vec<f64>>) -> PyResult<FeatureSequence<f64>> {
    let n = features.len();
    let d = features.first().map(|r| r.len()).unwrap_or(0);
    if features.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows must all have the same length"));
    }
    let data: Vec<f64> = features.into_iter().flatten().collect();
    FeatureSequence::new(n, d, data).map_err(to_py)
}

fn to_rows(seq: &FeatureSequence<f64>) -> Vec<Vec<f64>> {
    (0..seq.n).map(|i| seq.row(i).to_vec()).collect()
}

/// The hierarchical retention MIL model.
#[pyclass(unsendable, name = "RetMil")]
struct PyRetMil {
    model: Model<f64>,
}

#[pymethods]
impl PyRetMil {
    /// Build a fresh model. `config_json` matches the CLI's `model` section;
    /// omitted fields fall back to the desk-scale defaults.
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        let model = Model::init(config, seed).map_err(to_py)?;
        Ok(PyRetMil { model })
    }

    /// Forward pass. Returns `(logits, alpha, beta, token_scores)`.
    #[allow(clippy::type_complexity)]
    fn forward(&self, features: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        let seq = to_sequence(features)?;
        let trace = self.model.forward_streaming(&seq).map_err(to_py)?;
        let scores = Model::attention_scores(&trace).map_err(to_py)?;
        Ok((trace.logits.to_vec(), trace.alpha.clone(), trace.beta.clone(), scores))
    }

    /// Predicted class and class probabilities.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<(usize, Vec<f64>)> {
        let seq = to_sequence(features)?;
        self.model.predict(&seq).map_err(to_py)
    }

    /// Train on bags given as `(features, label)` pairs. Returns the history
    /// as `(epoch, train_loss, val_loss, val_bacc)` rows.
    #[pyo3(signature = (train_bags, val_bags, train_json=None))]
    fn fit(
        &mut self,
        train_bags: Vec<(Vec<Vec<f64>>, usize)>,
        val_bags: Vec<(Vec<Vec<f64>>, usize)>,
        train_json: Option<&str>,
    ) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let cfg: TrainConfig = match train_json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        let wrap = |bags: Vec<(Vec<Vec<f64>>, usize)>, prefix: &str| -> PyResult<Vec<BagRecord<f64>>> {
            bags.into_iter()
                .enumerate()
                .map(|(i, (features, label))| {
                    Ok(BagRecord { features: to_sequence(features)?, label, id: format!("{prefix}{i}") })
                })
                .collect()
        };
        let train_set = wrap(train_bags, "train")?;
        let val_set = wrap(val_bags, "val")?;
        let outcome = train(&mut self.model, &train_set, &val_set, &cfg).map_err(to_py)?;
        Ok(outcome.history.iter().map(|r| (r.epoch, r.train_loss, r.val_loss, r.val_bacc)).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.model).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRetMil { model: load_checkpoint::<f64>(&path).map_err(to_py)? })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.model.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Slot-to-token provenance of splitting `n` tokens into length-`l` rows.
#[pyfunction]
fn split_provenance(n: usize, l: usize) -> PyResult<Vec<Vec<usize>>> {
    Ok(sequencer::compute_provenance(n, l).map_err(to_py)?.rows)
}

/// Split features into the padded subsequence stack plus provenance.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn split_and_pad(features: Vec<Vec<f64>>, l: usize) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    let seq = to_sequence(features)?;
    let batch = sequencer::split_and_pad(&seq, l).map_err(to_py)?;
    let d = seq.d;
    let data = batch.stack.to_vec();
    let stack: Vec<Vec<Vec<f64>>> = (0..batch.num_rows())
        .map(|b| (0..l).map(|s| data[(b * l + s) * d..(b * l + s + 1) * d].to_vec()).collect())
        .collect();
    Ok((stack, batch.provenance.rows))
}

/// Lower-triangular decay matrix `gamma^(n-m)` as nested lists.
#[pyfunction]
fn decay_matrix(gamma: f64, n: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = retention::decay_matrix(gamma, n).map_err(to_py)?;
    let v = m.tensor().to_vec();
    Ok((0..n).map(|i| v[i * n..(i + 1) * n].to_vec()).collect())
}

#[pyfunction]
fn balanced_accuracy(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<f64> {
    data::balanced_accuracy(&y_true, &y_pred).map_err(to_py)
}

#[pyfunction]
fn weighted_f1(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<f64> {
    data::weighted_f1(&y_true, &y_pred).map_err(to_py)
}

#[pyfunction]
fn roc_auc(y_true: Vec<usize>, scores: Vec<f64>) -> PyResult<f64> {
    data::roc_auc(&y_true, &scores).map_err(to_py)
}

#[pyfunction]
fn write_features(path: PathBuf, features: Vec<Vec<f64>>) -> PyResult<()> {
    let seq = to_sequence(features)?;
    data::write_features(&path, &seq).map_err(to_py)
}

#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let seq = data::read_features::<f64>(&path).map_err(to_py)?;
    Ok(to_rows(&seq))
}

/// Generate a synthetic MIL dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn generate_synthetic_task(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg: SyntheticTaskConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SyntheticTaskConfig::default(),
    };
    generate_synthetic(&cfg, &out_dir).map_err(to_py)?;
    Ok(out_dir.join("manifest.json").to_string_lossy().into_owned())
}

/// Load one split of a manifest as `(features, label)` pairs.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn load_split(manifest_path: PathBuf, split: &str) -> PyResult<Vec<(Vec<Vec<f64>>, usize)>> {
    let split: SplitKind = split.parse().map_err(to_py)?;
    let manifest = Manifest::load(&manifest_path).map_err(to_py)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let bags = manifest.load_split::<f64>(&base, split).map_err(to_py)?;
    Ok(bags.into_iter().map(|b| (to_rows(&b.features), b.label)).collect())
}

/// Mean of the top-k projections of a bag onto a direction (the synthetic
/// task's solvability oracle).
#[pyfunction]
fn witness_score(features: Vec<Vec<f64>>, direction: Vec<f64>, k: usize) -> PyResult<f64> {
    let seq = to_sequence(features)?;
    Ok(witness_oracle_score(&seq, &direction, k))
}

#[pymodule]
fn retmil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRetMil>()?;
    m.add_function(wrap_pyfunction!(split_provenance, m)?)?;
    m.add_function(wrap_pyfunction!(split_and_pad, m)?)?;
    m.add_function(wrap_pyfunction!(decay_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_task, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(witness_score, m)?)?;
    Ok(())
}
