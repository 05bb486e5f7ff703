//! `ecg-robust`: data preparation, training, attacks, evaluation, sweeps and
//! the desk reproduction, driven by a JSON configuration.
//!
//! Precedence: built-in defaults, then `--config`, then flags.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ecg_robust::attacks::{read_set, write_set, AttackParams, AttackSpec, ClipAnchor};
use ecg_robust::dataio::{convert_native, load_records, prepare, save_records, Dataset};
use ecg_robust::defenses::{train, Method, TrainPlan, TrainedDefense};
use ecg_robust::desk::{desk_data, reproduce_desk};
use ecg_robust::eval::{
    confusion_matrix, evaluate_on_set, f1_scores, generate_set, parameter_sweep, performance_drop, results_csv,
    run_boundary_eval, run_situation, summarize, ModelResult, ResultRow, Situation, SweepAxis,
};

use config::{DataSource, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "ecg-robust", version, about = "Adversarial attacks and defenses for 1D ECG classifiers")]
struct Cli {
    /// JSON experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; every run writes into a subdirectory.
    #[arg(long, global = true, env = "ECG_ROBUST_OUT", default_value = "runs")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data preparation.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train one defense.
    Train(TrainArgs),
    /// Craft adversarial samples against a trained model.
    Attack(AttackArgs),
    /// Score models on an adversarial set or under a protocol.
    Evaluate(EvaluateArgs),
    /// Evaluate models along a t' or epsilon grid.
    Sweep(SweepArgs),
    /// Full synthetic pipeline: every defense, both situations, both sweeps
    /// and the boundary protocol over all seeds.
    ReproduceDesk(DeskArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Canonicalize, rebalance and split records into `<out>/data`.
    Prepare(PrepareArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Prepared data directory (from `data prepare`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate this many synthetic records per class.
    #[arg(long, conflicts_with_all = ["records", "native"])]
    synthetic: Option<usize>,
    /// Directory of `<id>.txt` records (needs `--index`).
    #[arg(long, requires = "index", conflicts_with = "native")]
    records: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Directory of native `.mat` records with `REFERENCE.csv`.
    #[arg(long)]
    native: Option<PathBuf>,
    /// Canonical record length.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Weight of the adversarial loss term.
    #[arg(long)]
    c: Option<f64>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// none, at, dd, adt, init-adt, dist-adt, jr or nsr.
    #[arg(long)]
    defense: Method,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// PGD iterations (t).
    #[arg(long)]
    pgd_steps: Option<usize>,
    /// SAP smoothing iterations (t').
    #[arg(long)]
    smooth_steps: Option<usize>,
    /// previous or original.
    #[arg(long)]
    anchor: Option<String>,
    /// Boundary attack query budget.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    /// pgd, sap or boundary.
    #[arg(long)]
    method: String,
    /// Trained defense directory to attack.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained defense directories to score.
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Existing adversarial set to score on.
    #[arg(long, conflicts_with = "situation")]
    set: Option<PathBuf>,
    /// I, II or boundary.
    #[arg(long)]
    situation: Option<String>,
    /// Undefended source model (Situation I and boundary).
    #[arg(long)]
    source: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// t_prime or epsilon.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated grid in attack units.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long = "model", required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    /// I or II.
    #[arg(long)]
    situation: Option<String>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackFlags,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct DeskArgs {
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Epochs for every training stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic records per class.
    #[arg(long)]
    per_class: Option<usize>,
}

fn parse_situation(s: &str) -> Result<Situation> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "i" | "1" => Situation::I,
        "ii" | "2" => Situation::II,
        "boundary" => Situation::Boundary,
        _ => bail!("unknown situation '{s}' (expected I, II or boundary)"),
    })
}

fn parse_axis(s: &str) -> Result<SweepAxis> {
    Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "t_prime" | "tprime" | "smooth_steps" => SweepAxis::SmoothSteps,
        "epsilon" | "eps" => SweepAxis::Epsilon,
        _ => bail!("unknown sweep axis '{s}' (expected t_prime or epsilon)"),
    })
}

fn parse_anchor(s: &str) -> Result<ClipAnchor> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "previous" => ClipAnchor::Previous,
        "original" => ClipAnchor::Original,
        _ => bail!("unknown clip anchor '{s}' (expected previous or original)"),
    })
}

fn plan_overrides(o: &mut Overrides, p: &PlanArgs) {
    if let Some(e) = p.epochs {
        o.set("desk/plan/epochs_first", e);
        o.set("desk/plan/epochs_second", e);
    }
    o.opt("desk/plan/learning_rate", p.learning_rate);
    o.opt("desk/plan/batch_size", p.batch_size);
    o.opt("desk/plan/temperature", p.temperature);
    o.opt("desk/plan/c", p.c);
    o.opt("desk/plan/seed", p.seed);
}

fn attack_overrides(o: &mut Overrides, a: &AttackFlags) -> Result<()> {
    o.opt("desk/attack/epsilon", a.epsilon);
    o.opt("desk/attack/alpha", a.alpha);
    o.opt("desk/attack/pgd_steps", a.pgd_steps);
    o.opt("desk/attack/smooth_steps", a.smooth_steps);
    if let Some(s) = &a.anchor {
        o.set("desk/attack/anchor", parse_anchor(s)?);
    }
    o.opt("desk/boundary/params/budget", a.budget);
    Ok(())
}

fn data_overrides(o: &mut Overrides, d: &DataArgs) {
    if let Some(dir) = &d.data {
        o.set("data", DataSource::Prepared { dir: dir.clone() });
    }
}

/// Loads the merged configuration and rejects it with every violation listed.
fn load_config(cli: &Cli, overrides: Overrides) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), overrides)?;
    let v = cfg.violations();
    if !v.is_empty() {
        bail!("invalid configuration ({} problems):\n  - {}", v.len(), v.join("\n  - "));
    }
    Ok(cfg)
}

/// Creates `dir` and writes the config snapshot and command line into it.
fn start_run(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    let argv: Vec<String> = std::env::args().collect();
    fs::write(dir.join("command.json"), serde_json::to_vec_pretty(&argv)?)?;
    Ok(())
}

fn load_split(cfg: &ExperimentConfig, scratch: &Path) -> Result<(Dataset, Dataset)> {
    Ok(match &cfg.data {
        DataSource::Synthetic => desk_data(&cfg.desk)?,
        DataSource::Records { dir, index } => prepare(&load_records(dir, index)?, &cfg.prepare)?,
        DataSource::Native { dir } => {
            let raw = convert_native(dir, &scratch.join("raw"))?;
            prepare(&raw, &cfg.prepare)?
        }
        DataSource::Prepared { dir } => {
            let part = |name: &str| load_records(&dir.join(name), &dir.join(name).join("index.csv"));
            (part("train")?, part("test")?)
        }
    })
}

fn load_defense(dir: &Path) -> Result<TrainedDefense> {
    if !dir.join("defense.json").is_file() {
        bail!("no trained defense at {} (missing defense.json)", dir.display());
    }
    TrainedDefense::load(dir).with_context(|| format!("loading defense {}", dir.display()))
}

fn plan_for(cfg: &ExperimentConfig) -> TrainPlan {
    cfg.desk.plan.clone()
}

fn cmd_prepare(cli: &Cli, a: &PrepareArgs) -> Result<()> {
    let mut o = Overrides::default();
    if let Some(n) = a.synthetic {
        o.set("data", DataSource::Synthetic);
        o.set("desk/per_class", n);
    }
    if let (Some(dir), Some(index)) = (&a.records, &a.index) {
        o.set(
            "data",
            DataSource::Records {
                dir: dir.clone(),
                index: index.clone(),
            },
        );
    }
    if let Some(dir) = &a.native {
        o.set("data", DataSource::Native { dir: dir.clone() });
    }
    if let Some(len) = a.length {
        o.set("desk/length", len);
        o.set("prepare/length", len);
    }
    if let Some(f) = a.train_fraction {
        o.set("desk/train_fraction", f);
        o.set("prepare/train_fraction", f);
    }
    if let Some(s) = a.seed {
        o.set("desk/data_seed", s);
        o.set("prepare/seed", s);
    }
    let cfg = load_config(cli, o)?;
    if matches!(cfg.data, DataSource::Prepared { .. }) {
        bail!("data prepare needs a raw source: --synthetic, --records/--index or --native");
    }
    let dir = cli.out.join("data");
    start_run(&dir, &cfg)?;
    let (train_set, test_set) = load_split(&cfg, &dir)?;
    save_records(&train_set, &dir.join("train"))?;
    save_records(&test_set, &dir.join("test"))?;
    println!(
        "prepared {} training and {} test records in {}",
        train_set.len(),
        test_set.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    plan_overrides(&mut o, &a.plan);
    data_overrides(&mut o, &a.data);
    let cfg = load_config(cli, o)?;
    let plan = plan_for(&cfg);
    let dir = cli.out.join("train").join(format!("{}-seed{}", a.defense.tag(), plan.seed));
    start_run(&dir, &cfg)?;
    let (train_set, _) = load_split(&cfg, &dir)?;
    let trained = train(a.defense, &train_set, &plan)?;
    trained.save(&dir)?;
    let last = trained.log.last().map(|l| l.train_accuracy).unwrap_or(0.0);
    println!(
        "trained {} ({} stage(s), final train accuracy {last:.3}) -> {}",
        a.defense,
        trained.models.len(),
        dir.display()
    );
    Ok(())
}

fn attack_spec(method: &str, cfg: &ExperimentConfig) -> Result<AttackSpec> {
    Ok(match method.to_ascii_lowercase().as_str() {
        "pgd" => AttackSpec::Pgd(AttackParams {
            smooth_steps: 0,
            ..cfg.desk.attack.clone()
        }),
        "sap" => AttackSpec::Sap(cfg.desk.attack.clone()),
        "boundary" => AttackSpec::Boundary(cfg.desk.boundary.params.clone()),
        _ => bail!("unknown attack method '{method}' (expected pgd, sap or boundary)"),
    })
}

fn cmd_attack(cli: &Cli, a: &AttackArgs) -> Result<()> {
    let mut o = Overrides::default();
    attack_overrides(&mut o, &a.attack)?;
    data_overrides(&mut o, &a.data);
    let cfg = load_config(cli, o)?;
    let spec = attack_spec(&a.method, &cfg)?;
    let defense = load_defense(&a.model)?;
    let base = cli.out.join("attack");
    let scratch = base.join("scratch");
    let (_, test_set) = load_split(&cfg, &scratch)?;
    let set = match spec {
        AttackSpec::Boundary(_) => {
            let run = run_boundary_eval(&[&defense], &defense, &test_set, &cfg.desk.boundary)?;
            println!("{} of {} boundary walks succeeded", run.set.len(), run.attempted);
            run.set
        }
        _ => generate_set(defense.model(), &spec, &test_set)?,
    };
    let dir = base.join(format!("{}-{}", spec.name(), set.manifest_id));
    start_run(&dir, &cfg)?;
    write_set(&set, &dir)?;
    let _ = fs::remove_dir_all(&scratch);
    println!("{} adversarial samples ({}) -> {}", set.len(), spec.name(), dir.display());
    Ok(())
}

fn clean_metrics(d: &TrainedDefense, test: &Dataset) -> Result<ecg_robust::eval::MetricsReport> {
    let preds = d.model().predict_classes(&test.signals(), 1.0)?;
    Ok(f1_scores(&confusion_matrix(&preds, &test.labels())?))
}

fn write_results(dir: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::write(dir.join("results.csv"), results_csv(rows))?;
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summarize(rows))?)?;
    for r in rows {
        println!(
            "{:9} {:8} {:>8} clean {:.3} adversarial {:.3} macro-F1 {:.3} drop {:.1}%",
            r.method, r.situation, r.value, r.clean_accuracy, r.accuracy, r.macro_f1, r.drop_percent
        );
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut o = Overrides::default();
    attack_overrides(&mut o, &a.attack)?;
    data_overrides(&mut o, &a.data);
    if let Some(s) = &a.situation {
        o.set("situation", parse_situation(s)?);
    }
    let cfg = load_config(cli, o)?;
    let models = a.models.iter().map(|m| load_defense(m)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainedDefense> = models.iter().collect();
    let source = a.source.as_deref().map(load_defense).transpose()?;
    let label = a.set.as_ref().map_or(cfg.situation.name(), |_| "set");
    let dir = cli.out.join("evaluate").join(label);
    start_run(&dir, &cfg)?;
    let (_, test_set) = load_split(&cfg, &dir)?;

    let rows: Vec<ResultRow> = if let Some(set_dir) = &a.set {
        let set = read_set(set_dir).with_context(|| format!("reading adversarial set {}", set_dir.display()))?;
        refs.iter()
            .map(|d| {
                let clean = clean_metrics(d, &test_set)?;
                let adversarial = evaluate_on_set(d.model(), &set, None)?;
                let r = ModelResult {
                    method: d.method,
                    model_id: d.fingerprint(),
                    manifest_id: set.manifest_id.clone(),
                    drop_percent: performance_drop(clean.accuracy, adversarial.accuracy),
                    clean,
                    adversarial,
                };
                Ok(ResultRow::new(&r, d.plan.seed, "set", set.spec.name(), 0.0))
            })
            .collect::<Result<_>>()?
    } else if cfg.situation == Situation::Boundary {
        let src = source.as_ref().context("the boundary protocol needs --source")?;
        let run = run_boundary_eval(&refs, src, &test_set, &cfg.desk.boundary)?;
        println!("{} of {} boundary walks succeeded", run.set.len(), run.attempted);
        write_set(&run.set, &dir.join("adversarial").join(&run.set.manifest_id))?;
        run.results
            .iter()
            .map(|r| ResultRow::new(r, src.plan.seed, "boundary", "boundary", cfg.desk.boundary.params.budget as f64))
            .collect()
    } else {
        let spec = AttackSpec::Sap(cfg.desk.attack.clone());
        let run = run_situation(cfg.situation, &refs, source.as_ref(), &spec, &test_set, Some(&dir.join("adversarial")))?;
        ResultRow::from_run(&run, cfg.desk.plan.seed, "headline", cfg.desk.attack.smooth_steps as f64)
    };
    write_results(&dir, &rows)?;
    println!("results -> {}", dir.display());
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut o = Overrides::default();
    attack_overrides(&mut o, &a.attack)?;
    data_overrides(&mut o, &a.data);
    if let Some(s) = &a.situation {
        o.set("situation", parse_situation(s)?);
    }
    if let Some(s) = &a.axis {
        o.set("sweep_axis", parse_axis(s)?);
    }
    o.opt("sweep_values", a.values.clone());
    let cfg = load_config(cli, o)?;
    if cfg.situation == Situation::Boundary {
        bail!("sweeps run under situation I or II");
    }
    let models = a.models.iter().map(|m| load_defense(m)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainedDefense> = models.iter().collect();
    let source = a.source.as_deref().map(load_defense).transpose()?;
    let dir = cli
        .out
        .join("sweep")
        .join(format!("{}-{}", cfg.sweep_axis.name(), cfg.situation.name()));
    start_run(&dir, &cfg)?;
    let (_, test_set) = load_split(&cfg, &dir)?;
    let grid = cfg.sweep_grid();
    let points = parameter_sweep(
        cfg.sweep_axis,
        &grid,
        &cfg.desk.attack,
        cfg.situation,
        &refs,
        source.as_ref(),
        &test_set,
    )?;
    let rows: Vec<ResultRow> = points
        .iter()
        .flat_map(|p| ResultRow::from_run(&p.run, cfg.desk.plan.seed, cfg.sweep_axis.name(), p.value))
        .collect();
    write_results(&dir, &rows)?;
    println!("results -> {}", dir.display());
    Ok(())
}

fn cmd_desk(cli: &Cli, a: &DeskArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.opt("desk/seeds", a.seeds.clone());
    if let Some(e) = a.epochs {
        o.set("desk/plan/epochs_first", e);
        o.set("desk/plan/epochs_second", e);
    }
    o.opt("desk/per_class", a.per_class);
    let cfg = load_config(cli, o)?;
    let dir = cli.out.join("desk");
    start_run(&dir, &cfg)?;
    let report = reproduce_desk(&cfg.desk, Some(&dir))?;
    for s in report.summary.iter().filter(|s| s.axis == "headline") {
        println!(
            "{:9} situation {:3} accuracy {:.3} ± {:.3}  drop {:.1}%",
            s.method, s.situation, s.accuracy_mean, s.accuracy_std, s.drop_mean
        );
    }
    for b in &report.boundary {
        println!(
            "seed {} boundary: {}/{} samples, source accuracy {:.3}",
            b.seed, b.successful, b.attempted, b.source_accuracy
        );
    }
    println!("desk reproduction finished in {:.0}s -> {}", report.seconds, dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Data {
            command: DataCommand::Prepare(a),
        } => cmd_prepare(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Attack(a) => cmd_attack(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::ReproduceDesk(a) => cmd_desk(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
