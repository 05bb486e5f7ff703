//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ecg_robust::attacks::{
    gaussian_kernel, pgd_attack, sap_attack, smooth_perturbation, AttackParams, ClipAnchor, KernelBank,
    KERNEL_SIZES, KERNEL_STDS,
};
use ecg_robust::classifier::{build_model, softmax_with_temperature, LabelVector};
use ecg_robust::dataio::{
    preprocess_record, read_index, rebalance, synthesize_ecg, Class, Dataset, NoiseDuplication, Record,
};
use ecg_robust::defenses::{train, train_adt, AdtVariant, Method, TrainPlan, TrainedDefense};
use ecg_robust::desk::{reproduce_desk, DeskConfig, DeskReport};
use ecg_robust::eval::{f1_scores, ConfusionMatrix};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn check(ok: bool, limit: Duration, elapsed: Duration) -> Result<(), String> {
    ensure(ok, "")?;
    ensure(
        elapsed <= limit,
        format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

// 1. Gaussian kernels.
fn kernels() -> Outcome {
    let start = Instant::now();
    let mut worst_center: f64 = 0.0;
    for (&s, &sd) in KERNEL_SIZES.iter().zip(&KERNEL_STDS) {
        let k = gaussian_kernel(s, sd).map_err(|e| e.to_string())?;
        ensure(k.len() == s, format!("size {s}: length {}", k.len()))?;
        let sum: f64 = k.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-12, format!("size {s}: sum {sum}"))?;
        for m in 0..s {
            ensure(k[m].to_bits() == k[s - 1 - m].to_bits(), format!("size {s}: asymmetric at {m}"))?;
        }
        // Center entry: numerator exp(0) = 1 over the 1-based normalizer.
        let big_m = (s - 1) / 2;
        let denom: f64 = (1..=s)
            .map(|i| {
                let d = i as f64 - big_m as f64 - 1.0;
                (-d * d / (2.0 * sd * sd)).exp()
            })
            .sum();
        let center = 1.0 / denom;
        let err = (k[big_m] - center).abs();
        worst_center = worst_center.max(err);
        ensure(err <= 1e-12, format!("size {s}: center {} vs {center}", k[big_m]))?;
    }
    check(true, Duration::from_secs(1), start.elapsed())?;
    Ok(format!("5 pairs, worst center error {worst_center:.1e}"))
}

// 2. Temperature softmax.
fn softmax() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_t1, mut worst_uniform): (f64, f64) = (0.0, 0.0);
    let mut unique = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=10);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let p = softmax_with_temperature(&z, 1.0).map_err(|e| e.to_string())?;
        for (a, b) in p.iter().zip(&e) {
            worst_t1 = worst_t1.max((a - b / total).abs());
        }
        let hot = softmax_with_temperature(&z, 1e6).map_err(|e| e.to_string())?;
        for a in hot.iter() {
            worst_uniform = worst_uniform.max((a - 1.0 / n as f64).abs());
        }
        let top = z.iter().filter(|&&v| v == max).count();
        if top == 1 {
            unique += 1;
            let want = z.iter().position(|&v| v == max).unwrap();
            for t in [0.01, 0.5, 1.0, 20.0, 1e3, 1e6] {
                let q = softmax_with_temperature(&z, t).map_err(|e| e.to_string())?;
                ensure(q.argmax() == want, format!("argmax changed at T={t}"))?;
            }
        }
    }
    ensure(worst_t1 <= 1e-9, format!("T=1 error {worst_t1:.1e}"))?;
    ensure(worst_uniform <= 1e-3, format!("T=1e6 distance from uniform {worst_uniform:.1e}"))?;
    check(true, Duration::from_secs(1), start.elapsed())?;
    Ok(format!(
        "T=1 error {worst_t1:.1e}, T=1e6 uniform gap {worst_uniform:.1e}, {unique} argmax checks"
    ))
}

// 3. Reverse-mode gradients against central differences.
fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let len = 256;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for probe in 0..20 {
        let model = build_model("desk", len, 4, probe).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let target = LabelVector::Hard(rng.random_range(0..4));
        let g = model.loss_graph(&target, 1.0).map_err(|e| e.to_string())?;
        let params = model.params().to_vec();
        let b = g.evaluate_with_gradients(&params, &[&x]).map_err(|e| e.to_string())?;

        let pi = rng.random_range(0..params.len());
        let pj = rng.random_range(0..params[pi].len());
        let mut p = params.clone();
        p[pi][pj] += h;
        let up = g.evaluate(&p, &[&x]).map_err(|e| e.to_string())?;
        p[pi][pj] -= 2.0 * h;
        let down = g.evaluate(&p, &[&x]).map_err(|e| e.to_string())?;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel(b.params[pi][pj], numeric));

        let xj = rng.random_range(0..len);
        let mut xp = x.clone();
        xp[xj] += h;
        let up = g.evaluate(&params, &[&xp]).map_err(|e| e.to_string())?;
        xp[xj] -= 2.0 * h;
        let down = g.evaluate(&params, &[&xp]).map_err(|e| e.to_string())?;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel(b.inputs[0][xj], numeric));
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    check(true, Duration::from_secs(60), start.elapsed())?;
    Ok(format!("20 probes, max relative error {worst:.2e}"))
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn desk_attack() -> AttackParams {
    DeskConfig::default().attack
}

// 4. Attack contracts.
fn attack_contracts() -> Outcome {
    let start = Instant::now();
    let len = 128;
    let model = build_model("desk", len, 4, 4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = AttackParams {
        epsilon: 0.05,
        alpha: 0.01,
        pgd_steps: 10,
        smooth_steps: 0,
        anchor: ClipAnchor::Original,
        ..AttackParams::training_default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = LabelVector::Hard(rng.random_range(0..4));
        let pgd = pgd_attack(&model, &x, &y, &params).map_err(|e| e.to_string())?;
        let inf = pgd.applied.iter().map(|a| a.abs()).fold(0.0, f64::max);
        worst = worst.max(inf);
        ensure(inf <= params.epsilon, format!("PGD perturbation {inf} > eps {}", params.epsilon))?;
        // Re-deriving x_adv - x adds one rounding of x itself.
        for (a, b) in pgd.adversarial.iter().zip(&x) {
            let slack = 2.0 * f64::EPSILON * (a.abs() + b.abs());
            ensure((a - b).abs() <= params.epsilon + slack, format!("|x_adv - x| = {}", (a - b).abs()))?;
        }
        let sap = sap_attack(&model, &x, &y, &params).map_err(|e| e.to_string())?;
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
        ensure(
            same(&sap.adversarial, &pgd.adversarial) && same(&sap.delta, &pgd.delta),
            "SAP with t'=0 differs from PGD",
        )?;
    }

    let smooth = AttackParams {
        smooth_steps: 6,
        ..params.clone()
    };
    let bank = KernelBank::new(&smooth.kernel_sizes, &smooth.kernel_stds).map_err(|e| e.to_string())?;
    let mut oracle_err: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y = LabelVector::Hard(rng.random_range(0..4));
        let sap = sap_attack(&model, &x, &y, &smooth).map_err(|e| e.to_string())?;
        let lib = smooth_perturbation(&sap.delta, &bank).map_err(|e| e.to_string())?;
        ensure(
            lib.iter().zip(&sap.applied).all(|(a, b)| a.to_bits() == b.to_bits()),
            "applied perturbation is not the kernel average of delta",
        )?;
        let direct = kernel_average_oracle(&sap.delta, &smooth.kernel_sizes, &smooth.kernel_stds);
        for (a, b) in direct.iter().zip(&sap.applied) {
            oracle_err = oracle_err.max((a - b).abs());
        }
    }
    ensure(oracle_err <= 1e-12, format!("independent smoothing differs by {oracle_err:.1e}"))?;
    check(true, Duration::from_secs(60), start.elapsed())?;
    Ok(format!(
        "PGD max |dx| {worst:.4} <= {}, SAP(t'=0) bit-identical, smoothing oracle error {oracle_err:.1e}",
        params.epsilon
    ))
}

/// Zero-padded same-length convolution with each normalized Gaussian, averaged.
fn kernel_average_oracle(delta: &[f64], sizes: &[usize], stds: &[f64]) -> Vec<f64> {
    let n = delta.len() as isize;
    let mut out = vec![0.0; delta.len()];
    for (&s, &sd) in sizes.iter().zip(stds) {
        let m = (s / 2) as isize;
        let w: Vec<f64> = (-m..=m).map(|d| (-((d * d) as f64) / (2.0 * sd * sd)).exp()).collect();
        let total: f64 = w.iter().sum();
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let j = i as isize + k as isize - m;
                if (0..n).contains(&j) {
                    acc += wk / total * delta[j as usize];
                }
            }
            *o += acc / sizes.len() as f64;
        }
    }
    out
}

fn total_variation(v: &[f64]) -> f64 {
    v.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

// 5. SAP perturbations are smoother than PGD perturbations.
fn smoothness() -> Outcome {
    let start = Instant::now();
    let cfg = DeskConfig::default();
    let data = synthesize_ecg(16, cfg.length, 5).map_err(|e| e.to_string())?;
    let plan = TrainPlan {
        epochs_first: 5,
        ..cfg.plan.clone()
    };
    let model = train(Method::None, &data, &plan).map_err(|e| e.to_string())?;
    let model = model.model();
    let sap_params = desk_attack();
    let pgd_params = AttackParams {
        smooth_steps: 0,
        ..sap_params.clone()
    };
    let (mut tv_sap, mut tv_pgd) = (0.0, 0.0);
    for r in &data.records {
        let y = LabelVector::Hard(r.label.index());
        let s = sap_attack(model, &r.samples, &y, &sap_params).map_err(|e| e.to_string())?;
        let p = pgd_attack(model, &r.samples, &y, &pgd_params).map_err(|e| e.to_string())?;
        tv_sap += total_variation(&s.applied);
        tv_pgd += total_variation(&p.applied);
    }
    let n = data.len() as f64;
    let (tv_sap, tv_pgd) = (tv_sap / n, tv_pgd / n);
    ensure(data.len() == 64, format!("batch has {} samples", data.len()))?;
    ensure(tv_sap < tv_pgd, format!("mean TV SAP {tv_sap:.4} >= PGD {tv_pgd:.4}"))?;
    check(true, Duration::from_secs(120), start.elapsed())?;
    Ok(format!("mean TV SAP {tv_sap:.4} < PGD {tv_pgd:.4} on 64 samples"))
}

fn same_models(a: &TrainedDefense, b: &TrainedDefense) -> bool {
    a.models.len() == b.models.len()
        && a.models.iter().zip(&b.models).all(|(x, y)| {
            x.params()
                .iter()
                .flatten()
                .zip(y.params().iter().flatten())
                .all(|(u, v)| u.to_bits() == v.to_bits())
        })
        && a.log.len() == b.log.len()
        && a.log.iter().zip(&b.log).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits())
}

// 6. Degenerate-equivalence lattice.
fn lattice() -> Outcome {
    let start = Instant::now();
    let cfg = DeskConfig::default();
    let data = synthesize_ecg(50, cfg.length, 6).map_err(|e| e.to_string())?;
    ensure(data.len() == 200, format!("set has {} samples", data.len()))?;
    let plan = TrainPlan {
        epochs_first: 5,
        epochs_second: 5,
        c: 0.0,
        c_second: Some(0.0),
        temperature: 20.0,
        seed: 11,
        ..cfg.plan.clone()
    };
    let std_plan = TrainPlan {
        temperature: 1.0,
        ..plan.clone()
    };
    let standard = train(Method::None, &data, &std_plan).map_err(|e| e.to_string())?;
    let at = train(Method::At, &data, &std_plan).map_err(|e| e.to_string())?;
    ensure(same_models(&standard, &at), "AT(c=0) differs from standard training")?;
    let dd = train(Method::Dd, &data, &plan).map_err(|e| e.to_string())?;
    let adt = train_adt(&data, &plan, AdtVariant::Full).map_err(|e| e.to_string())?;
    ensure(same_models(&dd, &adt), "ADT(c=0, c=0) differs from DD")?;
    check(true, Duration::from_secs(300), start.elapsed())?;
    Ok("AT(c=0) == standard, ADT(c=0,c=0) == DD, bit-identical over 5 epochs".into())
}

// 7. F1 metrics against hand-computed values.
fn metrics() -> Outcome {
    let start = Instant::now();
    let cases: [([[u64; 4]; 4], [f64; 4]); 5] = [
        (
            [[5, 0, 0, 0], [0, 3, 0, 0], [0, 0, 4, 0], [0, 0, 0, 2]],
            [1.0, 1.0, 1.0, 1.0],
        ),
        (
            [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 2, 0], [1, 0, 0, 1]],
            [2.0 / 4.0, 2.0 / 4.0, 4.0 / 5.0, 2.0 / 3.0],
        ),
        (
            [[3, 1, 0, 0], [2, 4, 0, 0], [0, 0, 5, 1], [0, 0, 0, 0]],
            [6.0 / 9.0, 8.0 / 11.0, 10.0 / 11.0, 0.0],
        ),
        ([[0; 4]; 4], [0.0; 4]),
        (
            [[50, 2, 5, 1], [3, 20, 4, 0], [8, 3, 30, 2], [1, 0, 2, 6]],
            [100.0 / 120.0, 40.0 / 52.0, 60.0 / 84.0, 12.0 / 18.0],
        ),
    ];
    for (i, (counts, want)) in cases.iter().enumerate() {
        let r = f1_scores(&ConfusionMatrix { counts: *counts });
        ensure(r.f1 == *want, format!("matrix {i}: {:?} vs {want:?}", r.f1))?;
        let macro_f1 = (want[0] + want[1] + want[2] + want[3]) / 4.0;
        ensure(
            (r.macro_f1 - macro_f1).abs() <= f64::EPSILON,
            format!("matrix {i}: macro {} vs {macro_f1}", r.macro_f1),
        )?;
    }
    check(true, Duration::from_secs(1), start.elapsed())?;
    Ok("5 matrices exact, macro F1 to machine precision".into())
}

fn class_counts(labels: &[Class]) -> [usize; 4] {
    let mut c = [0; 4];
    for l in labels {
        c[l.index()] += 1;
    }
    c
}

fn label_dataset(labels: &[Class]) -> Dataset {
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Record {
            id: format!("r{i}"),
            samples: Vec::new(),
            label,
        })
        .collect();
    Dataset::new(records, "labels")
}

/// Index of the real record corpus, if available.
fn real_index() -> Option<PathBuf> {
    std::env::var_os("ECG_ROBUST_REFERENCE")
        .map(PathBuf::from)
        .or_else(|| Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/REFERENCE.csv")))
        .filter(|p| p.is_file())
}

// 8. Preprocessing and rebalancing arithmetic.
fn pipeline_counts() -> Outcome {
    let start = Instant::now();
    for n in [1, 100, 4501, 8998, 8999, 9000, 9001, 12000] {
        let r = Record {
            id: format!("len{n}"),
            samples: (1..=n).map(|v| v as f64).collect(),
            label: Class::Normal,
        };
        let p = preprocess_record(&r);
        ensure(p.samples.len() == 9000, format!("length {n} -> {}", p.samples.len()))?;
        if n < 9000 {
            let left = (9000 - n) / 2;
            let right = 9000 - n - left;
            ensure(
                p.samples[..left].iter().all(|&v| v == 0.0)
                    && p.samples[left] == 1.0
                    && p.samples[9000 - right - 1] == n as f64
                    && p.samples[9000 - right..].iter().all(|&v| v == 0.0),
                format!("length {n}: padding is not {left} left / {right} right"),
            )?;
        } else {
            ensure(p.samples[..] == r.samples[..9000], format!("length {n}: prefix not kept"))?;
        }
    }

    let mut labels = Vec::new();
    for (c, n) in [(Class::Normal, 5076), (Class::Af, 758), (Class::Other, 2415), (Class::Noise, 279)] {
        labels.extend(std::iter::repeat_n(c, n));
    }
    let counts = rebalance(&label_dataset(&labels), NoiseDuplication::AddFive).class_counts();
    ensure(
        counts == [5076, 1516, 2415, 1674],
        format!("synthetic index rebalanced to {counts:?}"),
    )?;
    check(true, Duration::from_secs(1), start.elapsed())?;

    let real = match real_index() {
        Some(path) => {
            let t = Instant::now();
            let index = read_index(&path).map_err(|e| e.to_string())?;
            let labels: Vec<Class> = index.into_iter().map(|(_, c)| c).collect();
            let before = class_counts(&labels);
            let after = rebalance(&label_dataset(&labels), NoiseDuplication::AddFive).class_counts();
            let want = [before[0], 2 * before[1], before[2], 6 * before[3]];
            ensure(after == want, format!("real index {before:?} -> {after:?}, want {want:?}"))?;
            check(true, Duration::from_secs(60), t.elapsed())?;
            format!(
                "; real index AF {}->{}, Noise {}->{}",
                before[1], after[1], before[3], after[3]
            )
        }
        None => "; real index not present (set ECG_ROBUST_REFERENCE)".into(),
    };
    Ok(format!("length 9000 with symmetric padding, Noise 279->1674, AF 758->1516{real}"))
}

fn headline(report: &DeskReport, method: Method, situation: &str, seed: u64) -> Result<(f64, f64), String> {
    let rows: Vec<_> = report
        .select(method, situation, "headline")
        .into_iter()
        .filter(|r| r.seed == seed)
        .collect();
    match rows.as_slice() {
        [r] => Ok((r.clean_accuracy, r.accuracy)),
        _ => Err(format!("{} headline rows for {method}/{situation}/seed {seed}", rows.len())),
    }
}

// 9. Directional robustness on the desk pipeline.
fn robustness(report: &DeskReport) -> Outcome {
    let seeds = &report.config.seeds;
    ensure(seeds.len() == 3, format!("{} seeds", seeds.len()))?;
    let mut notes = Vec::new();
    for &seed in seeds {
        let (clean, adv) = headline(report, Method::None, "II", seed)?;
        let drop = (clean - adv) * 100.0;
        ensure(drop >= 30.0, format!("seed {seed}: undefended drop {drop:.1} points"))?;
        let (_, adt2) = headline(report, Method::Adt, "II", seed)?;
        let (_, dd2) = headline(report, Method::Dd, "II", seed)?;
        ensure(
            adt2 >= dd2 && adt2 >= adv,
            format!("seed {seed}: ADT II {adt2:.3} vs DD {dd2:.3}, none {adv:.3}"),
        )?;
        let (c1, a1) = headline(report, Method::Adt, "I", seed)?;
        let adt_drop = (c1 - a1) * 100.0;
        ensure(adt_drop <= 10.0, format!("seed {seed}: ADT situation I drop {adt_drop:.1} points"))?;
        notes.push(format!(
            "s{seed}: none -{drop:.1}pt, ADT/DD/none II {adt2:.3}/{dd2:.3}/{adv:.3}, ADT I -{adt_drop:.1}pt"
        ));
    }
    ensure(
        report.seconds < 1800.0,
        format!("pipeline took {:.0}s, limit 1800s", report.seconds),
    )?;
    Ok(format!("{}; {:.0}s", notes.join("; "), report.seconds))
}

// 10. Sweep completeness and shape.
fn sweeps(report: &DeskReport) -> Outcome {
    let cfg = &report.config;
    let eps: Vec<f64> = cfg.eps_values.iter().map(|e| e * cfg.eps_scale).collect();
    let mut worst_rise = f64::NEG_INFINITY;
    for situation in &cfg.sweep_situations {
        let sit = situation.name();
        for &method in &cfg.methods {
            for (axis, values) in [("t_prime", &cfg.t_prime_values), ("epsilon", &eps)] {
                for &seed in &cfg.seeds {
                    for &v in values.iter() {
                        let n = report
                            .select(method, sit, axis)
                            .iter()
                            .filter(|r| r.seed == seed && r.value == v)
                            .count();
                        ensure(n == 1, format!("{method}/{sit}/{axis}={v}/seed {seed}: {n} rows"))?;
                    }
                }
            }
            if method == Method::None {
                continue;
            }
            let rows = report.select(method, sit, "epsilon");
            let means: Vec<f64> = eps
                .iter()
                .map(|&v| {
                    let acc: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.accuracy).collect();
                    acc.iter().sum::<f64>() / acc.len() as f64
                })
                .collect();
            for (i, w) in means.windows(2).enumerate() {
                let rise = w[1] - w[0];
                worst_rise = worst_rise.max(rise);
                ensure(
                    rise <= 0.05,
                    format!("{method}/{sit}: accuracy rises {rise:.3} between eps steps {i} and {}", i + 1),
                )?;
            }
        }
    }
    Ok(format!("all cells present, largest accuracy rise along eps {worst_rise:+.3}"))
}

// 11. Boundary-attack protocol.
fn boundary(report: &DeskReport) -> Outcome {
    let mut notes = Vec::new();
    for b in &report.boundary {
        ensure(b.successful > 0, format!("seed {}: no successful boundary samples", b.seed))?;
        ensure(b.all_on_target, format!("seed {}: a sample is off target", b.seed))?;
        ensure(b.source_accuracy == 0.0, format!("seed {}: source accuracy {}", b.seed, b.source_accuracy))?;
        let defended: Vec<_> = b.accuracy.iter().filter(|(m, _)| *m != Method::None).collect();
        ensure(
            defended.len() + 1 == report.config.methods.len(),
            format!("seed {}: {} defended results", b.seed, defended.len()),
        )?;
        for (m, acc) in defended {
            ensure(*acc > 0.0, format!("seed {}: {m} scores {acc}", b.seed))?;
        }
        let min = b
            .accuracy
            .iter()
            .filter(|(m, _)| *m != Method::None)
            .map(|(_, a)| *a)
            .fold(f64::INFINITY, f64::min);
        ensure(b.seconds < 600.0, format!("seed {}: boundary took {:.0}s", b.seed, b.seconds))?;
        notes.push(format!(
            "s{}: {}/{} samples, min defended {min:.3}, {:.0}s",
            b.seed, b.successful, b.attempted, b.seconds
        ));
    }
    ensure(!notes.is_empty(), "no boundary runs")?;
    Ok(notes.join("; "))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {id:>2} PASS  {name} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run(1, "kernel correctness", kernels);
    ok &= run(2, "softmax temperature", softmax);
    ok &= run(3, "gradient fidelity", gradients);
    ok &= run(4, "attack contracts", attack_contracts);
    ok &= run(5, "smoothness", smoothness);
    ok &= run(6, "equivalence lattice", lattice);
    ok &= run(7, "metric oracle", metrics);
    ok &= run(8, "pipeline counts", pipeline_counts);

    let out = tempfile::tempdir().expect("temp dir");
    let report = reproduce_desk(&DeskConfig::default(), Some(out.path())).map_err(|e| e.to_string());
    let desk = |id, name, f: fn(&DeskReport) -> Outcome| {
        run(id, name, || report.as_ref().map_err(|e| format!("desk pipeline failed: {e}")).and_then(f))
    };
    ok &= desk(9, "directional robustness", robustness);
    ok &= desk(10, "sweep shape", sweeps);
    ok &= desk(11, "boundary protocol", boundary);

    if ok {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
}
