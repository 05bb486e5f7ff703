//! Confusion matrices, F1 metrics, the Situation I / II and boundary
//! evaluation protocols, parameter sweeps, and result tables.

mod protocol;
mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use protocol::{
    evaluate_on_set, generate_set, parameter_sweep, run_boundary_eval, run_situation, BoundaryEvalConfig, BoundaryRun,
    ModelResult, ProtocolRun, Situation, SweepAxis, SweepPoint,
};
pub use report::{results_csv, summarize, ResultRow, SummaryRow};

pub const CLASSES: usize = 4;

/// Rows are ground truth (N, A, O, P), columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASSES]; CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Ground-truth marginal of class `k`.
    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    /// Prediction marginal of class `k`.
    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASSES).map(|k| self.counts[k][k]).sum()
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= CLASSES || l >= CLASSES {
            return Err(Error::InvalidArgument(format!("class index out of range: label {l}, prediction {p}")));
        }
        cm.counts[l][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// F1 of Normal, AF, Other, Noise.
    pub f1: [f64; CLASSES],
    pub macro_f1: f64,
    pub samples: u64,
}

/// `F1_k = 2 * kk / (row_k + col_k)` per class (0 when both marginals are
/// empty), their arithmetic mean, and accuracy = trace / total.
pub fn f1_scores(cm: &ConfusionMatrix) -> MetricsReport {
    let mut f1 = [0.0; CLASSES];
    for (k, f) in f1.iter_mut().enumerate() {
        let denom = cm.row_sum(k) + cm.col_sum(k);
        if denom > 0 {
            *f = 2.0 * cm.counts[k][k] as f64 / denom as f64;
        }
    }
    let total = cm.total();
    MetricsReport {
        accuracy: if total == 0 { 0.0 } else { cm.trace() as f64 / total as f64 },
        f1,
        macro_f1: (f1[0] + f1[1] + f1[2] + f1[3]) / 4.0,
        samples: total,
    }
}

/// Relative accuracy loss `(clean - adversarial) / clean` in percent; 0
/// when the clean accuracy is 0.
pub fn performance_drop(clean: f64, adversarial: f64) -> f64 {
    if clean == 0.0 {
        0.0
    } else {
        (clean - adversarial) / clean * 100.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let l = [0, 1, 2, 3, 3, 1];
        let cm = confusion_matrix(&l, &l).unwrap();
        for g in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.counts[g][p] > 0, g == p);
            }
        }
        let r = f1_scores(&cm);
        assert_eq!(r.f1, [1.0; 4]);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn hand_tallied_pairs() {
        let labels = [0, 0, 1, 2, 3, 3, 1, 2];
        let preds = [0, 1, 1, 2, 3, 0, 2, 2];
        let cm = confusion_matrix(&preds, &labels).unwrap();
        let want = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 2, 0], [1, 0, 0, 1]];
        assert_eq!(cm.counts, want);
        assert_eq!(cm.total(), 8);
        assert!(confusion_matrix(&preds[..3], &labels).is_err());
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = confusion_matrix(&[0, 1, 2], &[0, 1, 2]).unwrap();
        let r = f1_scores(&cm);
        assert_eq!(r.f1, [1.0, 1.0, 1.0, 0.0]);
        assert_eq!(r.macro_f1, 0.75);
    }

    #[test]
    fn drop_reconstructs_clean_accuracy() {
        let (clean, adv) = (0.83, 0.41);
        let d = performance_drop(clean, adv);
        assert!((adv + d / 100.0 * clean - clean).abs() < 1e-9);
    }
}
