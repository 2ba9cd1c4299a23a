//! Classification metrics over 1-based label maps.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scores for one evaluation. `confusion[t][p]` counts pixels of true class
/// `t + 1` predicted as class `p + 1`.
///
/// The wall clock is informational only and deliberately left out of the
/// serialized form so that reports for the same run are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub total: u64,
    pub confusion: Vec<Vec<u64>>,
    /// Per-class recall; NaN-free: classes with no true pixels report 0.
    pub per_class_recall: Vec<f64>,
    pub oa: f64,
    pub aa: f64,
    pub f1_macro: f64,
    pub kappa: f64,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Confusion matrix and the derived scores.
///
/// Conventions for degenerate inputs: AA averages recall over the classes
/// that actually occur in `truth`; per-class F1 is 0 whenever its
/// denominator vanishes; kappa is 0 when the chance-agreement term makes it
/// 0/0 (single-class truth predicted perfectly).
pub fn compute_metrics(pred: &[u16], truth: &[u16], classes: usize) -> Result<MetricsReport> {
    if classes < 1 {
        return Err(Error::contract("compute_metrics: classes must be >= 1"));
    }
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "compute_metrics: {} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::data("compute_metrics: empty evaluation set"));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == 0 || p as usize > classes || t == 0 || t as usize > classes {
            return Err(Error::Data(format!(
                "compute_metrics: label pair ({p}, {t}) outside 1..={classes}"
            )));
        }
        confusion[t as usize - 1][p as usize - 1] += 1;
    }
    let total: u64 = pred.len() as u64;
    let diag: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let oa = diag as f64 / total as f64;

    let row_sums: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..classes)
        .map(|c| confusion.iter().map(|r| r[c]).sum())
        .collect();

    let mut per_class_recall = vec![0.0; classes];
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        if row_sums[c] > 0 {
            per_class_recall[c] = confusion[c][c] as f64 / row_sums[c] as f64;
            recall_sum += per_class_recall[c];
            present += 1;
        }
    }
    let aa = recall_sum / present as f64;

    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let denom = (row_sums[c] + col_sums[c]) as f64;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    let f1_macro = f1_sum / classes as f64;

    let p_o = oa;
    let p_e: f64 = (0..classes)
        .map(|c| (row_sums[c] as f64 / total as f64) * (col_sums[c] as f64 / total as f64))
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-12 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };

    Ok(MetricsReport {
        classes,
        total,
        confusion,
        per_class_recall,
        oa,
        aa,
        f1_macro,
        kappa,
        wall_clock_seconds: 0.0,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
