use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Clip-level classification metrics. Precision, recall and Jaccard are
/// macro averages over the classes that occur in the labels; a class whose
/// denominator is zero for a metric is left out of that metric's mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// `(precision, recall, jaccard)` of one class; `None` where the
    /// denominator is zero.
    pub fn class_scores(&self, c: usize) -> (Option<f64>, Option<f64>, Option<f64>) {
        let tp = self.confusion[c][c];
        let fp: u64 = (0..self.num_classes()).filter(|&r| r != c).map(|r| self.confusion[r][c]).sum();
        let fn_: u64 = self.confusion[c].iter().sum::<u64>() - tp;
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        (ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(tp, tp + fp + fn_))
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() || labels.is_empty() {
        bail!(
            Data,
            "need equal, non-zero numbers of predictions and labels (got {} and {})",
            predictions.len(),
            labels.len()
        );
    }
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&c| c >= num_classes) {
        bail!(Data, "class {bad} outside 0..{num_classes}");
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut report = MetricsReport {
        accuracy: correct as f64 / labels.len() as f64,
        precision: 0.0,
        recall: 0.0,
        jaccard: 0.0,
        confusion,
    };
    let present: Vec<usize> = (0..num_classes)
        .filter(|&c| report.confusion[c].iter().any(|&v| v > 0))
        .collect();
    let scores: Vec<_> = present.iter().map(|&c| report.class_scores(c)).collect();
    let macro_mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    report.precision = macro_mean(scores.iter().filter_map(|s| s.0).collect());
    report.recall = macro_mean(scores.iter().filter_map(|s| s.1).collect());
    report.jaccard = macro_mean(scores.iter().filter_map(|s| s.2).collect());
    Ok(report)
}
