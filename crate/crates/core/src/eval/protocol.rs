use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{confusion_matrix, f1_scores, performance_drop, MetricsReport, CLASSES};
use crate::attacks::{
    boundary_attack, pgd_attack, sap_attack, write_set, AdversarialRecord, AdversarialSet, AttackParams, AttackSpec,
    BoundaryParams,
};
use crate::classifier::{ClassifierModel, LabelVector};
use crate::dataio::Dataset;
use crate::defenses::{Method, TrainedDefense};
use crate::error::{Error, Result};

/// Evaluation temperature for every protocol.
const T_EVAL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Situation {
    /// Samples crafted once against the undefended source model.
    I,
    /// Samples crafted against each evaluated model itself.
    II,
    /// Decision-based samples crafted against the source model.
    Boundary,
}

impl Situation {
    pub fn name(self) -> &'static str {
        match self {
            Situation::I => "I",
            Situation::II => "II",
            Situation::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub method: Method,
    pub model_id: String,
    pub manifest_id: String,
    pub clean: MetricsReport,
    pub adversarial: MetricsReport,
    /// `(clean - adversarial) / clean` accuracy, in percent.
    pub drop_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub situation: Situation,
    pub source_model: Option<String>,
    pub attack: AttackSpec,
    pub results: Vec<ModelResult>,
}

/// Attacks every test record (untargeted, toward its true label's loss).
pub fn generate_set(model: &ClassifierModel, spec: &AttackSpec, test: &Dataset) -> Result<AdversarialSet> {
    let records = test
        .records
        .par_iter()
        .map(|r| {
            let target = LabelVector::Hard(r.label.index());
            let example = match spec {
                AttackSpec::Pgd(p) => pgd_attack(model, &r.samples, &target, p)?,
                AttackSpec::Sap(p) => sap_attack(model, &r.samples, &target, p)?,
                AttackSpec::Boundary(_) => {
                    return Err(Error::InvalidArgument(
                        "boundary sets are built by run_boundary_eval".into(),
                    ))
                }
            };
            Ok(AdversarialRecord {
                id: r.id.clone(),
                label: r.label.index(),
                target: None,
                example,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdversarialSet::new(spec.clone(), model.fingerprint(), records))
}

fn metrics(model: &ClassifierModel, signals: &[&[f64]], labels: &[usize]) -> Result<MetricsReport> {
    let preds = model.predict_classes(signals, T_EVAL)?;
    Ok(f1_scores(&confusion_matrix(&preds, labels)?))
}

/// Scores `model` on `set`; with `expected_source`, the set must have been
/// crafted against that model id.
pub fn evaluate_on_set(model: &ClassifierModel, set: &AdversarialSet, expected_source: Option<&str>) -> Result<MetricsReport> {
    if let Some(src) = expected_source {
        if set.source_model != src {
            return Err(Error::InvalidArgument(format!(
                "adversarial set {} was crafted against model {}, expected {src}",
                set.manifest_id, set.source_model
            )));
        }
    }
    metrics(model, &set.signals(), &set.labels())
}

fn result(defense: &TrainedDefense, test: &Dataset, set: &AdversarialSet, expected: &str) -> Result<ModelResult> {
    let model = defense.model();
    let clean = metrics(model, &test.signals(), &test.labels())?;
    let adversarial = evaluate_on_set(model, set, Some(expected))?;
    Ok(ModelResult {
        method: defense.method,
        model_id: model.fingerprint(),
        manifest_id: set.manifest_id.clone(),
        drop_percent: performance_drop(clean.accuracy, adversarial.accuracy),
        clean,
        adversarial,
    })
}

/// Situation I: one set crafted against `source`, shared by every defended
/// model. Situation II: one set per defended model, crafted against it.
/// Sets are written under `set_dir/<manifest id>` when given.
pub fn run_situation(
    situation: Situation,
    defended: &[&TrainedDefense],
    source: Option<&TrainedDefense>,
    spec: &AttackSpec,
    test: &Dataset,
    set_dir: Option<&Path>,
) -> Result<ProtocolRun> {
    if defended.is_empty() {
        return Err(Error::InvalidArgument("no defended models to evaluate".into()));
    }
    let keep = |set: &AdversarialSet| -> Result<()> {
        if let Some(dir) = set_dir {
            write_set(set, &dir.join(&set.manifest_id))?;
        }
        Ok(())
    };
    let results = match situation {
        Situation::I => {
            let source = source.ok_or_else(|| Error::InvalidArgument("situation I needs a source model".into()))?;
            let set = generate_set(source.model(), spec, test)?;
            keep(&set)?;
            let src = source.fingerprint();
            defended
                .iter()
                .map(|d| result(d, test, &set, &src))
                .collect::<Result<Vec<_>>>()?
        }
        Situation::II => defended
            .iter()
            .map(|d| {
                let set = generate_set(d.model(), spec, test)?;
                keep(&set)?;
                result(d, test, &set, &d.fingerprint())
            })
            .collect::<Result<Vec<_>>>()?,
        Situation::Boundary => {
            return Err(Error::InvalidArgument("use run_boundary_eval for the boundary protocol".into()))
        }
    };
    Ok(ProtocolRun {
        situation,
        source_model: match situation {
            Situation::I => source.map(TrainedDefense::fingerprint),
            _ => None,
        },
        attack: spec.clone(),
        results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEvalConfig {
    pub params: BoundaryParams,
    /// One attack repetition per seed.
    pub seeds: Vec<u64>,
    /// Victims attacked per seed (correctly classified test records).
    pub max_victims: usize,
    /// A walk counts as successful when it accepted at least one step and
    /// its final distance to the victim is at most this fraction of the
    /// starting (seed) distance.
    pub max_distance_ratio: f64,
}

impl Default for BoundaryEvalConfig {
    fn default() -> Self {
        Self {
            params: BoundaryParams::default(),
            seeds: vec![0],
            max_victims: 64,
            max_distance_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRun {
    pub source_model: String,
    pub attempted: usize,
    /// Successful samples, each classified as its target by the source model.
    pub set: AdversarialSet,
    /// Source-model accuracy on the successful samples.
    pub source_accuracy: f64,
    pub results: Vec<ModelResult>,
}

impl BoundaryRun {
    /// No walk succeeded; per-model results are empty.
    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// Boundary attacks against `source` only, then every defended model scored
/// on the successful samples against the victims' true labels.
pub fn run_boundary_eval(
    defended: &[&TrainedDefense],
    source: &TrainedDefense,
    test: &Dataset,
    cfg: &BoundaryEvalConfig,
) -> Result<BoundaryRun> {
    let v = cfg.params.violations();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    if source.method != Method::None {
        return Err(Error::InvalidArgument(format!(
            "boundary source must be trained without defense, got {}",
            source.method
        )));
    }
    let model = source.model();
    let fp = model.fingerprint();
    let preds = model.predict_classes(&test.signals(), T_EVAL)?;
    let victims: Vec<usize> = (0..test.len()).filter(|&i| preds[i] == test.records[i].label.index()).collect();
    let by_class: Vec<Vec<usize>> = (0..CLASSES)
        .map(|c| (0..test.len()).filter(|&i| preds[i] == c).collect())
        .collect();

    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = victims.clone();
        pool.shuffle(&mut rng);
        for &vi in pool.iter().take(cfg.max_victims) {
            let targets: Vec<usize> = (0..CLASSES).filter(|&c| c != preds[vi] && !by_class[c].is_empty()).collect();
            let Some(&target) = targets.choose(&mut rng) else { continue };
            let &si = by_class[target].choose(&mut rng).expect("non-empty class pool");
            jobs.push((seed, vi, si, target));
        }
    }
    let attempted = jobs.len();
    let outcomes = jobs
        .par_iter()
        .map(|&(seed, vi, si, target)| {
            let params = BoundaryParams {
                seed: seed.wrapping_mul(1_000_003).wrapping_add(vi as u64),
                ..cfg.params.clone()
            };
            let victim = &test.records[vi];
            let query = |x: &[f64]| model.predict(x, T_EVAL).map(|p| p.0);
            let out = boundary_attack(query, &victim.samples, &test.records[si].samples, target, &params, &fp)?;
            Ok((seed, vi, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (seed, vi, out) in outcomes {
        let victim = &test.records[vi];
        if out.improved && out.final_distance <= cfg.max_distance_ratio * out.initial_distance {
            records.push(AdversarialRecord {
                id: format!("{}@{seed}", victim.id),
                label: victim.label.index(),
                target: Some(out.target),
                example: out.example,
            });
        }
    }
    let set = AdversarialSet::new(AttackSpec::Boundary(cfg.params.clone()), fp.clone(), records);
    let signals = set.signals();
    let labels = set.labels();
    let source_accuracy = if set.is_empty() {
        0.0
    } else {
        metrics(model, &signals, &labels)?.accuracy
    };
    let results = if set.is_empty() {
        Vec::new()
    } else {
        defended
            .iter()
            .map(|d| result(d, test, &set, &fp))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(BoundaryRun {
        source_model: fp,
        attempted,
        set,
        source_accuracy,
        results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// SAP smoothing iterations `t'`.
    #[serde(rename = "t_prime", alias = "smooth_steps")]
    SmoothSteps,
    /// Noise level `eps`.
    Epsilon,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SmoothSteps => "t_prime",
            SweepAxis::Epsilon => "epsilon",
        }
    }

    pub fn apply(self, base: &AttackParams, value: f64) -> Result<AttackParams> {
        let mut p = base.clone();
        match self {
            SweepAxis::SmoothSteps => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("t' must be a non-negative integer, got {value}")));
                }
                p.smooth_steps = value as usize;
            }
            SweepAxis::Epsilon => p.epsilon = value,
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: f64,
    pub run: ProtocolRun,
}

/// One protocol run per value along `axis`; everything else in `base` is
/// held fixed.
pub fn parameter_sweep(
    axis: SweepAxis,
    values: &[f64],
    base: &AttackParams,
    situation: Situation,
    models: &[&TrainedDefense],
    source: Option<&TrainedDefense>,
    test: &Dataset,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let spec = AttackSpec::Sap(axis.apply(base, value)?);
            let run = run_situation(situation, models, source, &spec, test, None)?;
            Ok(SweepPoint { axis, value, run })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ClipAnchor;
    use crate::dataio::synthesize_ecg;
    use crate::defenses::{train, TrainPlan};

    fn fixture() -> (Dataset, Vec<TrainedDefense>, AttackParams) {
        let data = synthesize_ecg(6, 64, 11).unwrap();
        let attack = AttackParams {
            anchor: ClipAnchor::Original,
            ..AttackParams::training_default().scaled(0.01)
        };
        let plan = TrainPlan {
            architecture: crate::classifier::ModelKind::Desk,
            epochs_first: 3,
            epochs_second: 3,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 1,
            temperature: 1.0,
            first_stage_temperature: None,
            c: 0.5,
            c_second: None,
            attack: attack.clone(),
            regularizer: Default::default(),
            warmup_epoch: 2,
        };
        let models = [Method::None, Method::Dd]
            .into_iter()
            .map(|m| train(m, &data, &plan).unwrap())
            .collect();
        (data, models, attack)
    }

    #[test]
    fn situation_bookkeeping() {
        let (data, models, attack) = fixture();
        let refs: Vec<&TrainedDefense> = models.iter().collect();
        let spec = AttackSpec::Sap(attack);
        let one = run_situation(Situation::I, &refs, Some(&models[0]), &spec, &data, None).unwrap();
        assert!(one.results.iter().all(|r| r.manifest_id == one.results[0].manifest_id));
        let two = run_situation(Situation::II, &refs, None, &spec, &data, None).unwrap();
        assert_ne!(two.results[0].manifest_id, two.results[1].manifest_id);
        // Source model evaluated on its own samples: I and II coincide.
        assert_eq!(one.results[0], two.results[0]);
        assert!(run_situation(Situation::I, &refs, None, &spec, &data, None).is_err());
        for r in one.results.iter().chain(&two.results) {
            let back = r.adversarial.accuracy + r.drop_percent / 100.0 * r.clean.accuracy;
            assert!(r.clean.accuracy == 0.0 || (back - r.clean.accuracy).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_set_is_rejected() {
        let (data, models, attack) = fixture();
        let set = generate_set(models[0].model(), &AttackSpec::Pgd(attack), &data).unwrap();
        assert!(evaluate_on_set(models[1].model(), &set, Some(&models[1].fingerprint())).is_err());
        assert!(evaluate_on_set(models[1].model(), &set, Some(&models[0].fingerprint())).is_ok());
    }

    #[test]
    fn sweep_is_row_complete() {
        let (data, models, attack) = fixture();
        let refs: Vec<&TrainedDefense> = models.iter().collect();
        let pts = parameter_sweep(
            SweepAxis::SmoothSteps,
            &[0.0, 2.0, 4.0],
            &attack,
            Situation::II,
            &refs,
            None,
            &data,
        )
        .unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.iter().all(|p| p.run.results.len() == 2));
        assert!(SweepAxis::SmoothSteps.apply(&attack, 1.5).is_err());
    }

    #[test]
    fn boundary_samples_fool_the_source() {
        let (data, models, _) = fixture();
        let refs: Vec<&TrainedDefense> = models.iter().collect();
        let cfg = BoundaryEvalConfig {
            params: BoundaryParams {
                budget: 300,
                ..Default::default()
            },
            seeds: vec![0],
            max_victims: 6,
            max_distance_ratio: 1.0,
        };
        let run = run_boundary_eval(&refs, &models[0], &data, &cfg).unwrap();
        for r in &run.set.records {
            let p = models[0].model().predict(&r.example.adversarial, 1.0).unwrap().0;
            assert_eq!(Some(p), r.target);
        }
        if !run.is_empty() {
            assert_eq!(run.source_accuracy, 0.0);
            assert_eq!(run.results.len(), 2);
        }
        assert!(run_boundary_eval(&refs, &models[1], &data, &cfg).is_err());
    }
}
