//! Temperature softmax, label representations and the training losses.

mod io;
mod model;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_model, read_model, save_model, write_model};
pub use model::{build_model, ClassifierModel, LayerDesc, ModelKind};

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

static FLOOR_HITS: AtomicU64 = AtomicU64::new(0);

/// Number of times a loss has clamped a probability to [`PROB_FLOOR`].
pub fn floor_hit_count() -> u64 {
    FLOOR_HITS.load(Ordering::Relaxed)
}

fn floored_ln(p: f64) -> f64 {
    if p < PROB_FLOOR {
        FLOOR_HITS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Output of the softmax layer: one probability per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates entries in [0, 1] summing to 1 within 1e-9.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_simplex(&values)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Deref for ProbabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn validate_simplex(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("probability vector is empty".into()));
    }
    if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!("probability entries outside [0,1]: {values:?}")));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Lowest index of the maximum entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Training target: a one-hot class index or a soft label distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelVector {
    Hard(usize),
    Soft(ProbabilityVector),
}

impl LabelVector {
    pub fn soft(values: Vec<f64>) -> Result<Self> {
        Ok(Self::Soft(ProbabilityVector::new(values)?))
    }

    /// Dense form over `classes` entries.
    pub fn dense(&self, classes: usize) -> Vec<f64> {
        match self {
            LabelVector::Hard(l) => {
                let mut v = vec![0.0; classes];
                v[*l] = 1.0;
                v
            }
            LabelVector::Soft(p) => p.0.clone(),
        }
    }

    /// The class the label points at (argmax for soft labels).
    pub fn class(&self) -> usize {
        match self {
            LabelVector::Hard(l) => *l,
            LabelVector::Soft(p) => p.argmax(),
        }
    }
}

/// Weight `c` of the adversarial term in the mixed loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedLossConfig {
    c: f64,
}

impl MixedLossConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("mixing weight c must lie in [0,1], got {c}")));
        }
        Ok(Self { c })
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

/// `F_i = exp(z_i/T) / sum_l exp(z_l/T)`, evaluated with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<ProbabilityVector> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.is_empty() || logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidArgument("logits must be non-empty and finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    Ok(ProbabilityVector(e))
}

/// Mean over the batch of `-ln F_l(X)` where `l` is the true class.
pub fn hard_label_loss(probs: &[ProbabilityVector], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need a non-empty batch with one label per sample ({} probs, {} labels)",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", p.len())));
        }
        total -= floored_ln(p[l]);
    }
    Ok(total / probs.len() as f64)
}

/// Mean over the batch of `-sum_i Y_i(X) ln F_i(X)` for soft targets `Y`.
pub fn soft_label_loss(probs: &[ProbabilityVector], targets: &[ProbabilityVector]) -> Result<f64> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "need a non-empty batch with one target per sample ({} probs, {} targets)",
            probs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(targets) {
        if p.len() != y.len() {
            return Err(Error::Shape(format!("prediction width {} vs target width {}", p.len(), y.len())));
        }
        for (&pi, &yi) in p.iter().zip(y.iter()) {
            if yi != 0.0 {
                total -= yi * floored_ln(pi);
            }
        }
    }
    Ok(total / probs.len() as f64)
}

/// `c * adversarial + (1 - c) * natural`.
pub fn mixed_loss(adversarial: f64, natural: f64, config: MixedLossConfig) -> f64 {
    config.c * adversarial + (1.0 - config.c) * natural
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        for t in [0.1, 1.0, 37.0] {
            let p = softmax_with_temperature(&[0.0; 4], t).unwrap();
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn ln2_logit_gives_two_thirds() {
        let p = softmax_with_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_temperature_tends_to_uniform() {
        let p = softmax_with_temperature(&[3.0, 1.0, 0.2], 1e6).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-3));
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        assert!(softmax_with_temperature(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0, 2.0], -1.0).is_err());
    }

    #[test]
    fn hard_label_loss_values() {
        let one = pv(&[1.0, 0.0]);
        assert_eq!(hard_label_loss(&[one.clone(), one], &[0, 0]).unwrap(), 0.0);

        let e = (-1f64).exp();
        let p = pv(&[e, 1.0 - e]);
        let l = hard_label_loss(&[p.clone(), p], &[0, 0]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hard_label_loss_floors_zero_probability() {
        let before = floor_hit_count();
        let l = hard_label_loss(&[pv(&[0.0, 1.0])], &[0]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-12);
        assert!(floor_hit_count() > before);
    }

    #[test]
    fn soft_label_loss_values() {
        let half = pv(&[0.5, 0.5]);
        let l = soft_label_loss(&[half.clone()], &[pv(&[1.0, 0.0])]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = soft_label_loss(&[half.clone()], &[half]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mixed_loss_values() {
        let cfg = |c| MixedLossConfig::new(c).unwrap();
        assert_eq!(mixed_loss(5.0, 1.0, cfg(0.0)), 1.0);
        assert_eq!(mixed_loss(5.0, 1.0, cfg(1.0)), 5.0);
        assert_eq!(mixed_loss(2.0, 1.0, cfg(0.5)), 1.5);
        assert!(MixedLossConfig::new(1.5).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(LabelVector::soft(vec![0.2, 0.8]).is_ok());
    }
}
