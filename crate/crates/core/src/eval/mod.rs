//! Metrics, the inverse-frequency baseline, experiment orchestration and
//! markdown/CSV reports.

pub mod experiment;
pub mod report;

use crate::error::{Error, Result};
use crate::ot::Marginal;

pub use experiment::{ablation_cells, prepare, run_ablation, run_experiment, run_seed, run_stage2, Prepared, RunResult};
pub use report::{write_ablation_outputs, write_run_outputs};

/// Test-set evaluation of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub top1_error: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean of `per_class_accuracy`.
    pub balanced_accuracy: f64,
    pub seed: u64,
    pub fingerprint: String,
}

impl MetricsReport {
    /// Smallest per-class accuracy (recall).
    pub fn min_recall(&self) -> f64 {
        self.per_class_accuracy.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Confusion matrix and accuracy metrics. Classes absent from `labels`
/// count as accuracy 0.
pub fn confusion_and_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no examples to evaluate"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::input(format!(
                "class index out of range for {num_classes} classes (label {y}, prediction {p})"
            )));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    let balanced_accuracy = per_class_accuracy.iter().sum::<f64>() / num_classes as f64;
    Ok(MetricsReport {
        top1_error: 1.0 - correct as f64 / labels.len() as f64,
        confusion,
        per_class_accuracy,
        balanced_accuracy,
        seed: 0,
        fingerprint: String::new(),
    })
}

/// Per-class weights proportional to `1 / n_c`.
pub fn proportion_baseline_weights(class_counts: &[usize]) -> Result<Marginal> {
    if let Some(k) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::input(format!("class {k} has no examples")));
    }
    let inv: Vec<f64> = class_counts.iter().map(|&n| 1.0 / n as f64).collect();
    Marginal::from_unnormalized(&inv)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
