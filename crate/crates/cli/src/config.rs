//! Experiment configuration: defaults, then the JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ecg_robust::dataio::PrepareOptions;
use ecg_robust::desk::DeskConfig;
use ecg_robust::eval::{Situation, SweepAxis};

/// Where records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic corpus sized by `desk.per_class`, `desk.length`, `desk.data_seed`.
    Synthetic,
    /// `<id>.txt` files plus an `id,label` index.
    Records { dir: PathBuf, index: PathBuf },
    /// Native `.mat` records with `REFERENCE.csv`.
    Native { dir: PathBuf },
    /// Output of `data prepare` (`train/` and `test/` subdirectories).
    Prepared { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Length, rebalancing and split for real (non-synthetic) records.
    pub prepare: PrepareOptions,
    /// Synthetic data, training plan, attack, seeds and sweep grids.
    pub desk: DeskConfig,
    pub situation: Situation,
    pub sweep_axis: SweepAxis,
    /// Sweep values in attack units; the desk grid when absent.
    pub sweep_values: Option<Vec<f64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic,
            prepare: PrepareOptions::default(),
            desk: DeskConfig::default(),
            situation: Situation::II,
            sweep_axis: SweepAxis::SmoothSteps,
            sweep_values: None,
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `value` at a `/`-separated path, creating objects on the way.
fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    for key in path.split('/') {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        cur = cur
            .as_object_mut()
            .expect("object")
            .entry(key.to_string())
            .or_insert(Value::Null);
    }
    *cur = value;
}

/// Flag overrides as (path, value) pairs.
#[derive(Debug, Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, path: &str, value: impl Serialize) {
        self.0.push((path.to_string(), serde_json::to_value(value).expect("serializable flag")));
    }

    pub fn opt<T: Serialize>(&mut self, path: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(path, v);
        }
    }
}

impl ExperimentConfig {
    pub fn load(file: Option<&Path>, overrides: Overrides) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !user.is_object() {
                bail!("config {} must hold a JSON object", path.display());
            }
            merge(&mut value, user);
        }
        for (path, v) in overrides.0 {
            set_path(&mut value, &path, v);
        }
        serde_json::from_value(value).context("config does not match the expected structure")
    }

    /// Every violated precondition.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.desk.violations();
        let missing = |p: &Path, what: &str| (!p.exists()).then(|| format!("{what} {} does not exist", p.display()));
        match &self.data {
            DataSource::Synthetic => {}
            DataSource::Records { dir, index } => {
                v.extend(missing(dir, "records directory"));
                v.extend(missing(index, "index file"));
            }
            DataSource::Native { dir } => v.extend(missing(dir, "native data directory")),
            DataSource::Prepared { dir } => {
                v.extend(missing(&dir.join("train").join("index.csv"), "prepared training index"));
                v.extend(missing(&dir.join("test").join("index.csv"), "prepared test index"));
            }
        }
        if !matches!(self.data, DataSource::Synthetic) {
            let p = &self.prepare;
            if p.length == 0 {
                v.push("prepare.length must be > 0".into());
            }
            if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
                v.push(format!("prepare.train_fraction must lie in (0,1) (got {})", p.train_fraction));
            }
        }
        if let Some(values) = &self.sweep_values {
            if values.is_empty() {
                v.push("sweep_values must be non-empty".into());
            }
            for x in values {
                if let Err(e) = self.sweep_axis.apply(&self.desk.attack, *x) {
                    v.push(format!("sweep value {x}: {e}"));
                }
            }
        }
        v
    }

    /// Sweep grid in attack units.
    pub fn sweep_grid(&self) -> Vec<f64> {
        match (&self.sweep_values, self.sweep_axis) {
            (Some(v), _) => v.clone(),
            (None, SweepAxis::SmoothSteps) => self.desk.t_prime_values.clone(),
            (None, SweepAxis::Epsilon) => self.desk.eps_values.iter().map(|e| e * self.desk.eps_scale).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"desk": {"plan": {"epochs_first": 7, "batch_size": 4}, "seeds": [5]}}"#).unwrap();
        let mut o = Overrides::default();
        o.set("desk/plan/batch_size", 8);
        let c = ExperimentConfig::load(Some(&path), o).unwrap();
        assert_eq!(c.desk.plan.epochs_first, 7);
        assert_eq!(c.desk.plan.batch_size, 8);
        assert_eq!(c.desk.seeds, vec![5]);
        assert_eq!(c.desk.plan.learning_rate, DeskConfig::default().plan.learning_rate);
    }

    #[test]
    fn violations_cover_every_section() {
        let mut c = ExperimentConfig::default();
        c.desk.plan.batch_size = 0;
        c.desk.attack.epsilon = -1.0;
        c.data = DataSource::Prepared {
            dir: "/nonexistent".into(),
        };
        c.sweep_values = Some(vec![]);
        let v = c.violations();
        assert!(v.len() >= 5, "{v:?}");
    }
}
