//! Evaluation metrics: balanced accuracy, weighted F1, ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(y_true: &[usize], y_pred: &[usize]) -> Result<usize> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Input(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
    }
    if y_true.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let c = y_true.iter().chain(y_pred.iter()).max().unwrap() + 1;
    Ok(c)
}

/// `counts[t][p]` = samples with true class t predicted as p.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let implied = check_lengths(y_true, y_pred)?;
    if implied > num_classes {
        return Err(Error::Input(format!("class index {} out of range for {num_classes} classes", implied - 1)));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Mean over classes of per-class recall. Every class in `0..num_classes`
/// must appear in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = check_lengths(y_true, y_pred)?;
    let m = confusion_matrix(y_true, y_pred, c)?;
    let mut total = 0.0;
    for (t, row) in m.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            return Err(Error::Input(format!("class {t} has no true samples")));
        }
        total += row[t] as f64 / support as f64;
    }
    Ok(total / c as f64)
}

/// Support-weighted mean of per-class F1, with F1 = 0 for classes where
/// precision + recall is zero.
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = check_lengths(y_true, y_pred)?;
    let m = confusion_matrix(y_true, y_pred, c)?;
    let total: usize = y_true.len();
    let mut score = 0.0;
    for (t, row) in m.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support == 0 {
            return Err(Error::Input(format!("class {t} has no true samples")));
        }
        let tp = row[t];
        let pred_count: usize = (0..c).map(|row| m[row][t]).sum();
        let f1 = if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / pred_count as f64;
            let recall = tp as f64 / support as f64;
            2.0 * precision * recall / (precision + recall)
        };
        score += (support as f64 / total as f64) * f1;
    }
    Ok(score)
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive sample scores strictly higher, counting ties as one half.
pub fn roc_auc(y_true: &[usize], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        return Err(Error::Input(format!("{} labels vs {} scores", y_true.len(), scores.len())));
    }
    if y_true.iter().any(|&y| y > 1) {
        return Err(Error::Input("roc_auc expects binary labels 0/1".into()));
    }
    let pos: Vec<f64> = y_true.iter().zip(scores).filter(|(&y, _)| y == 1).map(|(_, &s)| s).collect();
    let neg: Vec<f64> = y_true.iter().zip(scores).filter(|(&y, _)| y == 0).map(|(_, &s)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Input("roc_auc needs both classes present".into()));
    }
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Metrics report emitted by `eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bacc: f64,
    pub weighted_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_note: Option<String>,
    pub confusion_matrix: Vec<Vec<usize>>,
    /// Classes whose F1 was forced to zero by the zero-division convention.
    pub zero_f1_classes: Vec<usize>,
}

/// Assemble the full report. `scores`, when given, are P(class 1) and feed
/// the AUC for binary tasks; multi-class tasks omit AUC with a note.
pub fn evaluate(
    y_true: &[usize],
    y_pred: &[usize],
    scores: Option<&[f64]>,
    num_classes: usize,
) -> Result<MetricsReport> {
    let bacc = balanced_accuracy(y_true, y_pred)?;
    let wf1 = weighted_f1(y_true, y_pred)?;
    let cm = confusion_matrix(y_true, y_pred, num_classes)?;
    let zero_f1: Vec<usize> = (0..num_classes).filter(|&t| t < cm.len() && cm[t][t] == 0).collect();
    let (auc, auc_note) = match (num_classes, scores) {
        (2, Some(s)) => (Some(roc_auc(y_true, s)?), None),
        (2, None) => (None, Some("no scores provided".to_string())),
        (c, _) => (None, Some(format!("auc is defined for binary tasks only (num_classes={c})"))),
    };
    Ok(MetricsReport { bacc, weighted_f1: wf1, auc, auc_note, confusion_matrix: cm, zero_f1_classes: zero_f1 })
}
