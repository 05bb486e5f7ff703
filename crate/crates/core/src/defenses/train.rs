use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::penalty::{jr_training_graph, nsr_shift, nsr_training_graph};
use super::{Adam, EpochLog, Method, TrainPlan, TrainedDefense};
use crate::attacks::{sap_attack, AttackParams};
use crate::classifier::{argmax, ClassifierModel, LabelVector, ProbabilityVector};
use crate::dataio::Dataset;
use crate::error::{Error, Result};

/// Where adversarial samples enter distillation training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdtVariant {
    /// Both networks.
    Full,
    /// First network only.
    InitOnly,
    /// Distilled network only.
    DistOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    Jacobian,
    Nsr,
}

struct Stage<'a> {
    index: usize,
    targets: &'a [LabelVector],
    temperature: f64,
    /// Adversarial weight `c` when adversarial samples are generated.
    adversarial: Option<f64>,
    regularizer: Option<Regularizer>,
    epochs: usize,
}

/// Distinct deterministic streams derived from the plan seed.
fn derive_seed(seed: u64, stage: usize, stream: u64) -> u64 {
    let mut z = seed ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SampleOut {
    loss: f64,
    grads: Vec<Vec<f64>>,
    correct: bool,
    adversarial: Option<(f64, Vec<Vec<f64>>)>,
    penalty: Option<(f64, Vec<Vec<f64>>)>,
}

fn natural_step(model: &ClassifierModel, x: &[f64], target: &LabelVector, t: f64) -> Result<(f64, Vec<Vec<f64>>, bool)> {
    let mut g = model.graph();
    let xi = g.input("x", model.input_len());
    let pn = model.param_nodes(&mut g);
    let z = model.add_logits(&mut g, xi, &pn)?;
    let loss = model.add_loss(&mut g, z, target, t)?;
    let trace = g.forward(model.params(), &[x])?;
    let correct = argmax(trace.value(z)) == target.class();
    let b = trace.gradients(loss)?;
    Ok((b.loss, b.params, correct))
}

fn sample_step(
    model: &ClassifierModel,
    plan: &TrainPlan,
    stage: &Stage<'_>,
    attack: &AttackParams,
    x: &[f64],
    target: &LabelVector,
    penalize: bool,
    probe: Option<Vec<f64>>,
) -> Result<SampleOut> {
    let (loss, grads, correct) = natural_step(model, x, target, stage.temperature)?;
    let adversarial = match stage.adversarial {
        Some(_) => {
            let adv = sap_attack(model, x, target, attack)?;
            let b = model.loss_gradients(&adv.adversarial, target, stage.temperature)?;
            Some((b.loss, b.params))
        }
        None => None,
    };
    let penalty = match (penalize, stage.regularizer) {
        (true, Some(Regularizer::Jacobian)) => {
            let r = &plan.regularizer;
            let u = probe.expect("probe drawn for jacobian penalty");
            let shifted: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + r.probe * b).collect();
            let b = jr_training_graph(model, r.lambda, r.probe)?.evaluate_with_gradients(model.params(), &[x, &shifted])?;
            Some((b.loss, b.params))
        }
        (true, Some(Regularizer::Nsr)) => {
            let r = &plan.regularizer;
            let (shifted, runner) = nsr_shift(model, x, target.class(), r.eps_max)?;
            let b = nsr_training_graph(model, target.class(), runner, r.beta)?
                .evaluate_with_gradients(model.params(), &[x, &shifted])?;
            Some((b.loss, b.params))
        }
        _ => None,
    };
    Ok(SampleOut {
        loss,
        grads,
        correct,
        adversarial,
        penalty,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Attack(_) => Error::Diverged {
            epoch,
            detail: e.to_string(),
        },
        other => other,
    }
}

fn accumulate(sum: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (s, v) in sum.iter_mut().zip(g) {
        for (a, b) in s.iter_mut().zip(v) {
            *a += b;
        }
    }
}

fn zeros_like(model: &ClassifierModel) -> Vec<Vec<f64>> {
    model.param_lens().into_iter().map(|n| vec![0.0; n]).collect()
}

/// Trains a freshly initialized network through one stage.
fn run_stage(
    signals: &[&[f64]],
    plan: &TrainPlan,
    stage: &Stage<'_>,
    log: &mut Vec<EpochLog>,
) -> Result<ClassifierModel> {
    let classes = crate::dataio::Class::ALL.len();
    let arch = plan.architecture;
    let mut model = ClassifierModel::from_layers(
        arch,
        arch.layers(classes),
        signals[0].len(),
        classes,
        derive_seed(plan.seed, stage.index, 0),
    )?;
    model.set_temperature(stage.temperature)?;
    let mut opt = Adam::new(plan.learning_rate, &model.param_lens());
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, stage.index, 1));
    let mut probes = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, stage.index, 2));
    let attack = AttackParams {
        temperature: stage.temperature,
        ..plan.attack.clone()
    };
    let n = signals.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=stage.epochs {
        order.shuffle(&mut shuffle);
        let penalize = stage.regularizer.is_some() && epoch >= plan.warmup_epoch;
        let (mut sum_obj, mut sum_nat, mut sum_adv, mut sum_pen, mut hits) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(plan.batch_size) {
            let draws: Vec<Option<Vec<f64>>> = batch
                .iter()
                .map(|&i| {
                    (penalize && stage.regularizer == Some(Regularizer::Jacobian))
                        .then(|| (0..signals[i].len()).map(|_| StandardNormal.sample(&mut probes)).collect())
                })
                .collect();
            let outs = batch
                .par_iter()
                .zip(draws)
                .map(|(&i, probe)| sample_step(&model, plan, stage, &attack, signals[i], &stage.targets[i], penalize, probe))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(epoch, e))?;

            let b = batch.len() as f64;
            let mut nat = zeros_like(&model);
            let mut nat_loss = 0.0;
            for o in &outs {
                accumulate(&mut nat, &o.grads);
                nat_loss += o.loss;
                hits += usize::from(o.correct);
            }
            let mut grad: Vec<Vec<f64>> = nat.into_iter().map(|v| v.into_iter().map(|g| g / b).collect()).collect();
            let mut obj = nat_loss / b;
            sum_nat += nat_loss;

            if let Some(c) = stage.adversarial {
                let mut adv = zeros_like(&model);
                let mut adv_loss = 0.0;
                for o in &outs {
                    let (l, g) = o.adversarial.as_ref().expect("adversarial output");
                    accumulate(&mut adv, g);
                    adv_loss += l;
                }
                for (gv, av) in grad.iter_mut().zip(&adv) {
                    for (g, a) in gv.iter_mut().zip(av) {
                        *g = (1.0 - c) * *g + c * (a / b);
                    }
                }
                obj = (1.0 - c) * obj + c * (adv_loss / b);
                sum_adv += adv_loss;
            }
            if penalize {
                let mut pen = zeros_like(&model);
                let mut pen_val = 0.0;
                for o in &outs {
                    let (l, g) = o.penalty.as_ref().expect("penalty output");
                    accumulate(&mut pen, g);
                    pen_val += l;
                }
                for (gv, pv) in grad.iter_mut().zip(&pen) {
                    for (g, p) in gv.iter_mut().zip(pv) {
                        *g += p / b;
                    }
                }
                obj += pen_val / b;
                sum_pen += pen_val;
            }
            if !obj.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("stage {} objective {obj}", stage.index),
                });
            }
            sum_obj += obj * b;
            opt.update(model.params_mut(), &grad);
        }
        let nf = n as f64;
        log.push(EpochLog {
            stage: stage.index,
            epoch,
            loss: sum_obj / nf,
            natural_loss: sum_nat / nf,
            adversarial_loss: stage.adversarial.map(|_| sum_adv / nf),
            penalty: penalize.then_some(sum_pen / nf),
            train_accuracy: hits as f64 / nf,
        });
        log::debug!(
            "stage {} epoch {epoch}: loss {:.4} acc {:.3}",
            stage.index,
            sum_obj / nf,
            hits as f64 / nf
        );
    }
    Ok(model)
}

fn prepare<'a>(data: &'a Dataset, plan: &TrainPlan) -> Result<(Vec<&'a [f64]>, Vec<LabelVector>)> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let len = data.records[0].samples.len();
    if data.records.iter().any(|r| r.samples.len() != len) {
        return Err(Error::Data("training records differ in length".into()));
    }
    let labels = data.records.iter().map(|r| LabelVector::Hard(r.label.index())).collect();
    Ok((data.signals(), labels))
}

fn single_stage(
    data: &Dataset,
    plan: &TrainPlan,
    method: Method,
    adversarial: Option<f64>,
    regularizer: Option<Regularizer>,
) -> Result<TrainedDefense> {
    let (signals, targets) = prepare(data, plan)?;
    let mut log = Vec::new();
    let stage = Stage {
        index: 1,
        targets: &targets,
        temperature: 1.0,
        adversarial,
        regularizer,
        epochs: plan.epochs_first,
    };
    let model = run_stage(&signals, plan, &stage, &mut log)?;
    Ok(TrainedDefense {
        method,
        models: vec![model],
        log,
        plan: plan.clone(),
    })
}

/// Plain training on hard labels at temperature 1 for `epochs_first` epochs.
pub fn train_standard(data: &Dataset, plan: &TrainPlan) -> Result<TrainedDefense> {
    single_stage(data, plan, Method::None, None, None)
}

/// Single-network training on `c * L_adv + (1 - c) * L`, with SAP samples
/// generated per mini-batch against the current parameters.
pub fn train_adversarial(data: &Dataset, plan: &TrainPlan) -> Result<TrainedDefense> {
    single_stage(data, plan, Method::At, Some(plan.c), None)
}

/// Standard training plus a Jacobian or NSR penalty from `warmup_epoch` on.
pub fn train_regularized(data: &Dataset, plan: &TrainPlan, regularizer: Regularizer) -> Result<TrainedDefense> {
    let method = match regularizer {
        Regularizer::Jacobian => Method::Jr,
        Regularizer::Nsr => Method::Nsr,
    };
    single_stage(data, plan, method, None, Some(regularizer))
}

fn two_stage(data: &Dataset, plan: &TrainPlan, method: Method, adv1: bool, adv2: bool) -> Result<TrainedDefense> {
    let (signals, hard) = prepare(data, plan)?;
    let (t1, t2) = plan.stage_temperatures();
    let (c1, c2) = plan.stage_weights();
    let mut log = Vec::new();
    let first = run_stage(
        &signals,
        plan,
        &Stage {
            index: 1,
            targets: &hard,
            temperature: t1,
            adversarial: adv1.then_some(c1),
            regularizer: None,
            epochs: plan.epochs_first,
        },
        &mut log,
    )?;
    let soft = soft_labels(&first, &signals, t2)?;
    let second = run_stage(
        &signals,
        plan,
        &Stage {
            index: 2,
            targets: &soft,
            temperature: t2,
            adversarial: adv2.then_some(c2),
            regularizer: None,
            epochs: plan.epochs_second,
        },
        &mut log,
    )?;
    Ok(TrainedDefense {
        method,
        models: vec![first, second],
        log,
        plan: plan.clone(),
    })
}

/// Probability vectors of `model` at temperature `t`, validated as labels.
fn soft_labels(model: &ClassifierModel, signals: &[&[f64]], t: f64) -> Result<Vec<LabelVector>> {
    model
        .predict_batch(signals, t)?
        .into_iter()
        .map(|(_, p)| Ok(LabelVector::Soft(ProbabilityVector::new(p.as_slice().to_vec())?)))
        .collect()
}

/// Defensive distillation: a first network on hard labels at temperature
/// T, then an identically shaped network on its temperature-T soft labels.
pub fn train_distilled(data: &Dataset, plan: &TrainPlan) -> Result<TrainedDefense> {
    two_stage(data, plan, Method::Dd, false, false)
}

/// Adversarial distillation training. Stages that include adversarial
/// samples mix SAP samples (paired with that stage's labels) into the loss
/// with weight `c`; excluded stages are plain distillation stages.
pub fn train_adt(data: &Dataset, plan: &TrainPlan, variant: AdtVariant) -> Result<TrainedDefense> {
    match variant {
        AdtVariant::Full => two_stage(data, plan, Method::Adt, true, true),
        AdtVariant::InitOnly => two_stage(data, plan, Method::InitAdt, true, false),
        AdtVariant::DistOnly => two_stage(data, plan, Method::DistAdt, false, true),
    }
}

/// Dispatch by method tag.
pub fn train(method: Method, data: &Dataset, plan: &TrainPlan) -> Result<TrainedDefense> {
    match method {
        Method::None => train_standard(data, plan),
        Method::At => train_adversarial(data, plan),
        Method::Dd => train_distilled(data, plan),
        Method::Adt => train_adt(data, plan, AdtVariant::Full),
        Method::InitAdt => train_adt(data, plan, AdtVariant::InitOnly),
        Method::DistAdt => train_adt(data, plan, AdtVariant::DistOnly),
        Method::Jr => train_regularized(data, plan, Regularizer::Jacobian),
        Method::Nsr => train_regularized(data, plan, Regularizer::Nsr),
    }
}
