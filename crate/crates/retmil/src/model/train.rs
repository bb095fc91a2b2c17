//! Training loop: shuffled single-bag Adam steps, per-epoch validation, and
//! early stopping on validation loss with best-snapshot restore.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::data::{balanced_accuracy, BagRecord};
use crate::error::{Error, Result};
use crate::tensor::{AdamParams, NoGradGuard, Scalar};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Bags per optimizer step. Fixed at 1.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, weight_decay: 1e-5, max_epochs: 100, patience: 15, batch_size: 1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("train: lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train: weight_decay must be non-negative".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("train: max_epochs must be >= 1".into()));
        }
        if self.patience < 1 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "train: patience {} must be in 1..={}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("train: batch_size is fixed at 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bacc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Train in place. The model ends up holding the parameters of the best
/// validation-loss epoch, not the last one.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_bags: &[BagRecord<T>],
    val_bags: &[BagRecord<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::Input("train and validation sets must be non-empty".into()));
    }
    for bag in train_bags.iter().chain(val_bags) {
        if bag.label >= model.config.num_classes {
            return Err(Error::Input(format!(
                "bag '{}' label {} out of range for {} classes",
                bag.id, bag.label, model.config.num_classes
            )));
        }
    }

    let mut store = model.param_store()?;
    let adam = AdamParams::new(T::from_f64(cfg.lr), T::from_f64(cfg.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = store.snapshot();
    let mut epochs_since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for &i in &order {
            let bag = &train_bags[i];
            store.zero_grad();
            let loss = model
                .forward(&bag.features)
                .and_then(|trace| trace.logits.cross_entropy_logits(bag.label))
                .map_err(|e| numeric_context(e, epoch, &bag.id))?;
            loss_sum += loss.item()?.as_f64();
            loss.backward()?;
            store.adam_step(adam)?;
        }
        let train_loss = loss_sum / train_bags.len() as f64;

        let (val_loss, val_bacc) = validate(model, val_bags).map_err(|e| numeric_context(e, epoch, "validation"))?;
        history.push(EpochRecord { epoch, train_loss, val_loss, val_bacc });

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_snapshot = store.snapshot();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    store.restore(&best_snapshot)?;
    Ok(TrainOutcome { history, best_epoch, best_val_loss, stopped_early })
}

fn numeric_context(e: Error, epoch: usize, what: &str) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("epoch {epoch}, {what}: {e}"))
    } else {
        e
    }
}

fn validate<T: Scalar>(model: &Model<T>, bags: &[BagRecord<T>]) -> Result<(f64, f64)> {
    let _guard = NoGradGuard::new();
    let mut loss_sum = 0.0f64;
    let mut y_true = Vec::with_capacity(bags.len());
    let mut y_pred = Vec::with_capacity(bags.len());
    for bag in bags {
        let trace = model.forward(&bag.features)?;
        loss_sum += trace.logits.cross_entropy_logits(bag.label)?.item()?.as_f64();
        let probs = trace.logits.softmax_rows()?.to_vec();
        let mut best = 0usize;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = j;
            }
        }
        y_true.push(bag.label);
        y_pred.push(best);
    }
    let bacc = balanced_accuracy(&y_true, &y_pred)?;
    Ok((loss_sum / bags.len() as f64, bacc))
}

/// History CSV: `epoch,train_loss,val_loss,val_bacc`, one row per epoch.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_bacc\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_bacc));
    }
    std::fs::write(path, out)?;
    Ok(())
}
