//! Desk-scale end-to-end pipeline: synthetic data, every defense, both
//! evaluation situations, both parameter sweeps and the boundary protocol,
//! repeated over seeds.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackParams, AttackSpec, BoundaryParams, ClipAnchor};
use crate::classifier::ModelKind;
use crate::dataio::{split_dataset, synthesize_ecg, Dataset};
use crate::defenses::{train, Method, RegularizerConfig, TrainPlan, TrainedDefense};
use crate::error::{Error, IoContext, Result};
use crate::eval::{
    parameter_sweep, results_csv, run_boundary_eval, run_situation, summarize, BoundaryEvalConfig, ResultRow,
    Situation, SummaryRow, SweepAxis,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub per_class: usize,
    pub length: usize,
    pub data_seed: u64,
    pub train_fraction: f64,
    /// Training repetitions; each seed retrains every defense.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub plan: TrainPlan,
    /// Multiplier from raw-data noise units to synthetic amplitude units.
    pub eps_scale: f64,
    /// Headline attack, already in synthetic units.
    pub attack: AttackParams,
    /// `t'` sweep values.
    pub t_prime_values: Vec<f64>,
    /// Noise sweep values in raw-data units (multiplied by `eps_scale`).
    pub eps_values: Vec<f64>,
    pub sweep_situations: Vec<Situation>,
    pub boundary: BoundaryEvalConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let eps_scale = 0.015;
        let original = |p: AttackParams| AttackParams {
            anchor: ClipAnchor::Original,
            ..p.scaled(eps_scale)
        };
        Self {
            per_class: 100,
            length: 256,
            data_seed: 7,
            train_fraction: 0.8,
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            plan: TrainPlan {
                architecture: ModelKind::Desk,
                epochs_first: 20,
                epochs_second: 20,
                batch_size: 16,
                learning_rate: 0.003,
                seed: 0,
                temperature: 1.0,
                first_stage_temperature: None,
                c: 0.5,
                c_second: None,
                attack: original(AttackParams::training_default()),
                // The squared Jacobian norm scales with 1 / amplitude^2.
                regularizer: RegularizerConfig {
                    lambda: RegularizerConfig::default().lambda * eps_scale * eps_scale,
                    eps_max: eps_scale,
                    ..RegularizerConfig::default()
                },
                warmup_epoch: 3,
            },
            eps_scale,
            attack: original(AttackParams::evaluation_default()),
            t_prime_values: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            eps_values: vec![5.0, 10.0, 15.0, 20.0, 25.0],
            sweep_situations: vec![Situation::I, Situation::II],
            boundary: BoundaryEvalConfig {
                params: BoundaryParams {
                    budget: 2000,
                    ..BoundaryParams::default()
                },
                seeds: vec![0],
                max_victims: 16,
                max_distance_ratio: 0.5,
            },
        }
    }
}

impl DeskConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.per_class == 0 {
            v.push("per_class must be >= 1".into());
        }
        if self.length < 64 {
            v.push(format!("length must be >= 64 (got {})", self.length));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            v.push(format!("train_fraction must lie in (0,1) (got {})", self.train_fraction));
        }
        if self.seeds.is_empty() {
            v.push("at least one seed is required".into());
        }
        if !self.methods.contains(&Method::None) {
            v.push("methods must include 'none' (the source model)".into());
        }
        if !(self.eps_scale > 0.0) {
            v.push(format!("eps_scale must be > 0 (got {})", self.eps_scale));
        }
        if self.t_prime_values.is_empty() || self.eps_values.is_empty() {
            v.push("sweep value lists must be non-empty".into());
        }
        v.extend(self.plan.violations());
        v.extend(self.attack.violations());
        v.extend(self.boundary.params.violations());
        v
    }
}

/// Boundary protocol outcome for one training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub seed: u64,
    pub source_model: String,
    pub attempted: usize,
    pub successful: usize,
    pub source_accuracy: f64,
    /// Every successful sample is assigned its target class by the source.
    pub all_on_target: bool,
    pub accuracy: Vec<(Method, f64)>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub config: DeskConfig,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub boundary: Vec<BoundarySummary>,
    pub seconds: f64,
}

impl DeskReport {
    /// Rows for one method, situation and axis across seeds, ordered by seed then value.
    pub fn select(&self, method: Method, situation: &str, axis: &str) -> Vec<&ResultRow> {
        self.rows
            .iter()
            .filter(|r| r.method == method.tag() && r.situation == situation && r.axis == axis)
            .collect()
    }
}

/// Synthetic corpus split for the desk runs.
pub fn desk_data(cfg: &DeskConfig) -> Result<(Dataset, Dataset)> {
    let data = synthesize_ecg(cfg.per_class, cfg.length, cfg.data_seed)?;
    split_dataset(&data, cfg.train_fraction, cfg.data_seed)
}

/// Trains every configured defense for one seed.
pub fn train_all(cfg: &DeskConfig, train_set: &Dataset, seed: u64) -> Result<Vec<TrainedDefense>> {
    let plan = TrainPlan {
        seed,
        ..cfg.plan.clone()
    };
    cfg.methods
        .iter()
        .map(|&m| {
            let t = Instant::now();
            let d = train(m, train_set, &plan)?;
            log::info!("seed {seed}: trained {m} in {:.1}s", t.elapsed().as_secs_f64());
            Ok(d)
        })
        .collect()
}

fn check_boundary(run: &crate::eval::BoundaryRun, source: &TrainedDefense) -> Result<bool> {
    for r in &run.set.records {
        let p = source.model().predict(&r.example.adversarial, 1.0)?.0;
        if Some(p) != r.target {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Runs the whole pipeline and, with `out`, writes `results.csv`,
/// `summary.json`, `boundary.json` and `config.json` there.
pub fn reproduce_desk(cfg: &DeskConfig, out: Option<&Path>) -> Result<DeskReport> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    let start = Instant::now();
    let (train_set, test_set) = desk_data(cfg)?;
    let headline = AttackSpec::Sap(cfg.attack.clone());
    let sweep_base = AttackParams {
        smooth_steps: 0,
        ..cfg.attack.clone()
    };
    let eps_values: Vec<f64> = cfg.eps_values.iter().map(|e| e * cfg.eps_scale).collect();
    let mut rows = Vec::new();
    let mut boundary = Vec::new();

    for &seed in &cfg.seeds {
        let defenses = train_all(cfg, &train_set, seed)?;
        let refs: Vec<&TrainedDefense> = defenses.iter().collect();
        let source = defenses
            .iter()
            .find(|d| d.method == Method::None)
            .expect("validated: methods include none");
        let sets = out.map(|o| o.join("adversarial").join(format!("seed{seed}")));

        for situation in [Situation::I, Situation::II] {
            let t = Instant::now();
            let run = run_situation(situation, &refs, Some(source), &headline, &test_set, sets.as_deref())?;
            rows.extend(ResultRow::from_run(&run, seed, "headline", cfg.attack.smooth_steps as f64));
            log::info!("seed {seed}: situation {} in {:.1}s", situation.name(), t.elapsed().as_secs_f64());
        }
        for &situation in &cfg.sweep_situations {
            for (axis, values, base) in [
                (SweepAxis::SmoothSteps, &cfg.t_prime_values, &cfg.attack),
                (SweepAxis::Epsilon, &eps_values, &sweep_base),
            ] {
                let t = Instant::now();
                let pts = parameter_sweep(axis, values, base, situation, &refs, Some(source), &test_set)?;
                for p in &pts {
                    rows.extend(ResultRow::from_run(&p.run, seed, axis.name(), p.value));
                }
                log::info!(
                    "seed {seed}: {} sweep, situation {} in {:.1}s",
                    axis.name(),
                    situation.name(),
                    t.elapsed().as_secs_f64()
                );
            }
        }
        let t = Instant::now();
        let run = run_boundary_eval(&refs, source, &test_set, &cfg.boundary)?;
        rows.extend(
            run.results
                .iter()
                .map(|r| ResultRow::new(r, seed, "boundary", "boundary", cfg.boundary.params.budget as f64)),
        );
        boundary.push(BoundarySummary {
            seed,
            source_model: run.source_model.clone(),
            attempted: run.attempted,
            successful: run.set.len(),
            source_accuracy: run.source_accuracy,
            all_on_target: check_boundary(&run, source)?,
            accuracy: run.results.iter().map(|r| (r.method, r.adversarial.accuracy)).collect(),
            seconds: t.elapsed().as_secs_f64(),
        });
        log::info!("seed {seed}: boundary protocol in {:.1}s", t.elapsed().as_secs_f64());
    }

    let report = DeskReport {
        config: cfg.clone(),
        summary: summarize(&rows),
        rows,
        boundary,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub fn write_report(report: &DeskReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let files: [(&str, Vec<u8>); 4] = [
        ("results.csv", results_csv(&report.rows).into_bytes()),
        ("summary.json", serde_json::to_vec_pretty(&report.summary)?),
        ("boundary.json", serde_json::to_vec_pretty(&report.boundary)?),
        ("config.json", serde_json::to_vec_pretty(&report.config)?),
    ];
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).at(&path)?;
    }
    Ok(())
}
