//! Training procedures: standard, adversarial training, defensive
//! distillation, adversarial distillation training and its two variants,
//! and Jacobian / NSR regularized training.

mod adam;
mod penalty;
mod train;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackParams;
use crate::classifier::{load_model, save_model, ClassifierModel, ModelKind};
use crate::error::{Error, IoContext, Result};

pub use adam::Adam;
pub use penalty::{input_jacobian, jacobian_penalty, nsr_penalty, nsr_terms, JacobianMode, NsrTerms, NSR_MARGIN_FLOOR};
pub use train::{train, train_adt, train_adversarial, train_distilled, train_regularized, train_standard, AdtVariant, Regularizer};

/// Defense method tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    At,
    Dd,
    Adt,
    InitAdt,
    DistAdt,
    Jr,
    Nsr,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::None,
        Method::At,
        Method::Dd,
        Method::Adt,
        Method::InitAdt,
        Method::DistAdt,
        Method::Jr,
        Method::Nsr,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::At => "at",
            Method::Dd => "dd",
            Method::Adt => "adt",
            Method::InitAdt => "init-adt",
            Method::DistAdt => "dist-adt",
            Method::Jr => "jr",
            Method::Nsr => "nsr",
        }
    }

    /// Distillation-family methods train two networks.
    pub fn is_two_stage(self) -> bool {
        matches!(self, Method::Dd | Method::Adt | Method::InitAdt | Method::DistAdt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown defense '{s}' (expected one of none, at, dd, adt, init-adt, dist-adt, jr, nsr)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Jacobian penalty weight.
    pub lambda: f64,
    /// NSR noise radius (L-inf).
    pub eps_max: f64,
    /// NSR penalty weight.
    pub beta: f64,
    #[serde(default)]
    pub jacobian_mode: JacobianMode,
    /// Finite-difference probe length for the Jacobian training surrogate.
    #[serde(default = "default_probe")]
    pub probe: f64,
}

fn default_probe() -> f64 {
    1e-2
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda: 44.0,
            eps_max: 1.0,
            beta: 1.0,
            jacobian_mode: JacobianMode::Probabilities,
            probe: default_probe(),
        }
    }
}

impl RegularizerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [("lambda", self.lambda), ("eps_max", self.eps_max), ("beta", self.beta)] {
            if !(val >= 0.0 && val.is_finite()) {
                v.push(format!("regularizer {name} must be finite and >= 0 (got {val})"));
            }
        }
        if !(self.probe > 0.0) {
            v.push(format!("jacobian probe must be > 0 (got {})", self.probe));
        }
        v
    }
}

fn default_architecture() -> ModelKind {
    ModelKind::Desk
}

/// Everything a trainer needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    #[serde(default = "default_architecture")]
    pub architecture: ModelKind,
    /// Epochs of the first (or only) network.
    pub epochs_first: usize,
    /// Epochs of the distilled network.
    pub epochs_second: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Distillation temperature.
    pub temperature: f64,
    /// First-stage temperature when it differs from `temperature`.
    #[serde(default)]
    pub first_stage_temperature: Option<f64>,
    /// Weight of the adversarial loss term.
    pub c: f64,
    /// Second-stage weight when it differs from `c`.
    #[serde(default)]
    pub c_second: Option<f64>,
    /// Settings for in-training adversarial sample generation.
    pub attack: AttackParams,
    pub regularizer: RegularizerConfig,
    /// First (1-based) epoch at which regularization penalties apply.
    pub warmup_epoch: usize,
}

impl TrainPlan {
    /// Full-scale settings: 100 + 100 epochs, batch 16, Adam at 0.001,
    /// T = 1, c = 0.5, penalties from epoch 11.
    pub fn full_scale() -> Self {
        Self {
            architecture: ModelKind::Cnn13,
            epochs_first: 100,
            epochs_second: 100,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 0,
            temperature: 1.0,
            first_stage_temperature: None,
            c: 0.5,
            c_second: None,
            attack: AttackParams::training_default(),
            regularizer: RegularizerConfig::default(),
            warmup_epoch: 11,
        }
    }

    pub fn stage_temperatures(&self) -> (f64, f64) {
        (self.first_stage_temperature.unwrap_or(self.temperature), self.temperature)
    }

    pub fn stage_weights(&self) -> (f64, f64) {
        (self.c, self.c_second.unwrap_or(self.c))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs_first == 0 {
            v.push("epochs_first must be >= 1".into());
        }
        if self.epochs_second == 0 {
            v.push("epochs_second must be >= 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        let t_first = self.first_stage_temperature.into_iter().map(|t| ("first_stage_temperature", t));
        for (name, t) in std::iter::once(("temperature", self.temperature)).chain(t_first) {
            if !(t >= 1.0 && t.is_finite()) {
                v.push(format!("{name} must be >= 1 (got {t})"));
            }
        }
        for (name, c) in std::iter::once(("c", self.c)).chain(self.c_second.map(|c| ("c_second", c))) {
            if !(0.0..=1.0).contains(&c) {
                v.push(format!("{name} must lie in [0,1] (got {c})"));
            }
        }
        if self.warmup_epoch == 0 {
            v.push("warmup_epoch is 1-based and must be >= 1".into());
        }
        v.extend(self.attack.violations());
        v.extend(self.regularizer.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1 for the first network, 2 for the distilled network.
    pub stage: usize,
    /// 1-based.
    pub epoch: usize,
    /// Mean optimized objective.
    pub loss: f64,
    /// Mean loss on natural samples.
    pub natural_loss: f64,
    /// Mean loss on generated adversarial samples, when generated.
    pub adversarial_loss: Option<f64>,
    /// Mean regularization penalty, when active.
    pub penalty: Option<f64>,
    /// Accuracy on natural training samples before each batch update.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDefense {
    pub method: Method,
    /// One model, or first and distilled networks for the distillation family.
    pub models: Vec<ClassifierModel>,
    pub log: Vec<EpochLog>,
    pub plan: TrainPlan,
}

#[derive(Serialize, Deserialize)]
struct DefenseManifest {
    method: Method,
    models: Vec<String>,
    fingerprints: Vec<String>,
    plan: TrainPlan,
}

impl TrainedDefense {
    /// The model to deploy: the last one trained.
    pub fn model(&self) -> &ClassifierModel {
        self.models.last().expect("trained defense holds a model")
    }

    pub fn fingerprint(&self) -> String {
        self.model().fingerprint()
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("stage,epoch,loss,natural_loss,adversarial_loss,penalty,train_accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.log {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.stage,
                r.epoch,
                r.loss,
                r.natural_loss,
                opt(r.adversarial_loss),
                opt(r.penalty),
                r.train_accuracy
            ));
        }
        s
    }

    /// Writes model files, `training_log.csv` and `defense.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let names: Vec<String> = if self.models.len() == 2 {
            vec!["initial.model".into(), "model.model".into()]
        } else {
            vec!["model.model".into()]
        };
        for (m, name) in self.models.iter().zip(&names) {
            save_model(m, &dir.join(name))?;
        }
        let path = dir.join("training_log.csv");
        fs::write(&path, self.log_csv()).at(&path)?;
        let manifest = DefenseManifest {
            method: self.method,
            fingerprints: self.models.iter().map(ClassifierModel::fingerprint).collect(),
            models: names,
            plan: self.plan.clone(),
        };
        let path = dir.join("defense.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)
    }

    /// Reads a directory written by [`TrainedDefense::save`]; the training log
    /// is not reloaded.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("defense.json");
        let bytes = fs::read(&path).at(&path)?;
        let manifest: DefenseManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let models = manifest
            .models
            .iter()
            .map(|n| load_model(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        for (m, fp) in models.iter().zip(&manifest.fingerprints) {
            if m.fingerprint() != *fp {
                return Err(Error::Format {
                    path,
                    detail: format!("model fingerprint {} does not match manifest {fp}", m.fingerprint()),
                });
            }
        }
        let want = if manifest.method.is_two_stage() { 2 } else { 1 };
        if models.len() != want {
            return Err(Error::Format {
                path,
                detail: format!("method {} needs {want} models, found {}", manifest.method, models.len()),
            });
        }
        Ok(Self {
            method: manifest.method,
            models,
            log: Vec::new(),
            plan: manifest.plan,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.tag()));
        }
        assert!("fgsm".parse::<Method>().is_err());
    }

    #[test]
    fn plan_validation_lists_every_problem() {
        let mut p = TrainPlan::full_scale();
        assert!(p.validate().is_ok());
        p.epochs_first = 0;
        p.batch_size = 0;
        p.temperature = 0.5;
        p.regularizer.lambda = -1.0;
        match p.validate() {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
