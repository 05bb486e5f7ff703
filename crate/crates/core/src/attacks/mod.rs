//! White-box (PGD, SAP) and decision-based (boundary) attacks.

mod advset;
mod boundary;
mod kernel;
mod pgd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use advset::{read_set, write_set, AdversarialSet, AdversarialRecord};
pub use boundary::{boundary_attack, BoundaryOutcome, BoundaryParams};
pub use kernel::{gaussian_kernel, hanning_filter, hanning_window, smooth_perturbation, KernelBank};
pub use pgd::{pgd_attack, sap_attack};

/// Which point the per-step Clip projects around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClipAnchor {
    /// The previous iterate, exactly as the iteration is written. Cumulative
    /// drift can reach `t * min(alpha, eps)`.
    #[default]
    Previous,
    /// The clean signal (or a zero perturbation): a total L-inf budget of `eps`.
    Original,
}

/// Kernel sizes used for SAP smoothing, paired index-wise with [`KERNEL_STDS`].
pub const KERNEL_SIZES: [usize; 5] = [5, 7, 11, 15, 19];
pub const KERNEL_STDS: [f64; 5] = [1.0, 3.0, 5.0, 7.0, 10.0];

/// Parameters shared by PGD and SAP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    /// L-inf noise level, in signal amplitude units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    /// PGD iterations (`t`).
    pub pgd_steps: usize,
    /// SAP perturbation-update iterations (`t'`).
    pub smooth_steps: usize,
    pub kernel_sizes: Vec<usize>,
    pub kernel_stds: Vec<f64>,
    #[serde(default)]
    pub anchor: ClipAnchor,
    /// Softmax temperature of the attacked loss.
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl AttackParams {
    /// Training-time generation settings: eps 10, alpha 1, t = t' = 5.
    pub fn training_default() -> Self {
        Self {
            epsilon: 10.0,
            alpha: 1.0,
            pgd_steps: 5,
            smooth_steps: 5,
            kernel_sizes: KERNEL_SIZES.to_vec(),
            kernel_stds: KERNEL_STDS.to_vec(),
            anchor: ClipAnchor::Previous,
            temperature: 1.0,
        }
    }

    /// Evaluation attack: t = 20, t' = 40.
    pub fn evaluation_default() -> Self {
        Self {
            pgd_steps: 20,
            smooth_steps: 40,
            ..Self::training_default()
        }
    }

    /// Multiplies `epsilon` and `alpha` by `factor` (amplitude rescaling).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            epsilon: self.epsilon * factor,
            alpha: self.alpha * factor,
            ..self.clone()
        }
    }

    /// Every violated precondition, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0) {
            errs.push(format!("attack epsilon must be > 0 (got {})", self.epsilon));
        }
        if !(self.alpha > 0.0) {
            errs.push(format!("attack alpha must be > 0 (got {})", self.alpha));
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("attack temperature must be > 0 (got {})", self.temperature));
        }
        if self.kernel_sizes.len() != self.kernel_stds.len() {
            errs.push(format!(
                "kernel size list ({}) and std list ({}) differ in length",
                self.kernel_sizes.len(),
                self.kernel_stds.len()
            ));
        }
        if self.kernel_sizes.is_empty() {
            errs.push("kernel list is empty".into());
        }
        for &s in &self.kernel_sizes {
            if s % 2 == 0 {
                errs.push(format!("kernel size {s} is not odd"));
            }
        }
        for &sd in &self.kernel_stds {
            if !(sd > 0.0) {
                errs.push(format!("kernel std {sd} is not > 0"));
            }
        }
        errs
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        KernelBank::new(&self.kernel_sizes, &self.kernel_stds)
    }
}

/// Description of how an adversarial example was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "lowercase")]
pub enum AttackSpec {
    Pgd(AttackParams),
    Sap(AttackParams),
    Boundary(BoundaryParams),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Pgd(_) => "pgd",
            AttackSpec::Sap(_) => "sap",
            AttackSpec::Boundary(_) => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: AttackSpec,
    /// Fingerprint of the model the attack ran against.
    pub source_model: String,
}

/// Original signal, raw and applied perturbation, and the resulting sample.
///
/// `adversarial[i] == original[i] + applied[i]` holds exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub original: Vec<f64>,
    pub delta: Vec<f64>,
    pub applied: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub provenance: Provenance,
}

impl AdversarialExample {
    pub(crate) fn new(original: &[f64], delta: Vec<f64>, applied: Vec<f64>, provenance: Provenance) -> Self {
        let adversarial = original.iter().zip(&applied).map(|(x, a)| x + a).collect();
        Self {
            original: original.to_vec(),
            delta,
            applied,
            adversarial,
            provenance,
        }
    }
}

/// Projects `candidate` elementwise into `[anchor - eps, anchor + eps]`.
pub fn clip(candidate: &[f64], anchor: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if candidate.len() != anchor.len() {
        return Err(Error::Shape(format!(
            "clip candidate length {} vs anchor length {}",
            candidate.len(),
            anchor.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(candidate
        .iter()
        .zip(anchor)
        .map(|(&c, &a)| c.clamp(a - epsilon, a + epsilon))
        .collect())
}

/// `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
