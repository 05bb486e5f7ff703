//! Jacobian and noise-to-signal-ratio regularizers.
//!
//! The exact penalties need per-class vector-Jacobian products. Training
//! needs their parameter gradients, which would take second-order
//! differentiation; the trainer therefore uses first-order surrogates built
//! from two forward passes (see [`jr_training_graph`] and
//! [`nsr_training_graph`]).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Op};
use crate::classifier::{argmax, ClassifierModel};
use crate::error::{Error, Result};

/// Guard for the NSR ratio denominator.
pub const NSR_MARGIN_FLOOR: f64 = 1e-12;

/// Which output the Jacobian penalty differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianMode {
    /// Softmax probabilities at temperature 1.
    #[default]
    Probabilities,
    /// Raw logits.
    Logits,
}

fn check_len(model: &ClassifierModel, x: &[f64]) -> Result<()> {
    if x.len() != model.input_len() {
        return Err(Error::Shape(format!(
            "signal length {} vs model input {}",
            x.len(),
            model.input_len()
        )));
    }
    Ok(())
}

/// Rows `d out_i / d x` of the input Jacobian.
pub fn input_jacobian(model: &ClassifierModel, x: &[f64], mode: JacobianMode, t: f64) -> Result<Vec<Vec<f64>>> {
    check_len(model, x)?;
    let mut g = model.graph();
    let xi = g.input("x", model.input_len());
    let pn = model.param_nodes(&mut g);
    let z = model.add_logits(&mut g, xi, &pn)?;
    let out = match mode {
        JacobianMode::Logits => z,
        JacobianMode::Probabilities => g.op(Op::SoftmaxT { x: z, temperature: t })?,
    };
    let trace = g.forward(model.params(), &[x])?;
    let k = model.classes();
    (0..k)
        .map(|i| {
            let mut seed = vec![0.0; k];
            seed[i] = 1.0;
            Ok(trace.vjp(out, &seed)?.inputs.remove(0))
        })
        .collect()
}

/// `lambda` times the batch mean of the squared Frobenius norm of the
/// input Jacobian.
pub fn jacobian_penalty(model: &ClassifierModel, batch: &[&[f64]], lambda: f64, mode: JacobianMode) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 || batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x in batch {
        let j = input_jacobian(model, x, mode, 1.0)?;
        total += j.iter().flatten().map(|v| v * v).sum::<f64>();
    }
    Ok(lambda * total / batch.len() as f64)
}

/// Per-sample NSR terms at clean input `x` with true class `label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsrTerms {
    /// `z_y - z_j` with `j` the strongest other class.
    pub margin: f64,
    /// First-order worst-case margin loss, `eps_max * ||d margin / dx||_1`.
    pub noise: f64,
    /// `noise / max(|margin|, 1e-12)`.
    pub ratio: f64,
    /// `max(0, noise - margin) - max(0, -margin)`: the part of the margin
    /// loss caused by the noise.
    pub hinge: f64,
    pub runner_up: usize,
}

fn runner_up(z: &[f64], label: usize) -> usize {
    let mut masked = z.to_vec();
    masked[label] = f64::NEG_INFINITY;
    argmax(&masked)
}

/// Margin gradient with respect to the input, and the NSR terms.
fn nsr_terms_with_gradient(model: &ClassifierModel, x: &[f64], label: usize, eps_max: f64) -> Result<(NsrTerms, Vec<f64>)> {
    check_len(model, x)?;
    if label >= model.classes() {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let mut g = model.graph();
    let xi = g.input("x", model.input_len());
    let pn = model.param_nodes(&mut g);
    let z = model.add_logits(&mut g, xi, &pn)?;
    let trace = g.forward(model.params(), &[x])?;
    let zv = trace.value(z);
    let j = runner_up(zv, label);
    let margin = zv[label] - zv[j];
    let mut seed = vec![0.0; model.classes()];
    seed[label] = 1.0;
    seed[j] = -1.0;
    let grad = trace.vjp(z, &seed)?.inputs.remove(0);
    let noise = eps_max * grad.iter().map(|v| v.abs()).sum::<f64>();
    let terms = NsrTerms {
        margin,
        noise,
        ratio: noise / margin.abs().max(NSR_MARGIN_FLOOR),
        hinge: (noise - margin).max(0.0) - (-margin).max(0.0),
        runner_up: j,
    };
    Ok((terms, grad))
}

pub fn nsr_terms(model: &ClassifierModel, x: &[f64], label: usize, eps_max: f64) -> Result<NsrTerms> {
    nsr_terms_with_gradient(model, x, label, eps_max).map(|(t, _)| t)
}

/// `beta * mean(ratio + hinge)` over the batch.
pub fn nsr_penalty(model: &ClassifierModel, batch: &[&[f64]], labels: &[usize], eps_max: f64, beta: f64) -> Result<f64> {
    if eps_max < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "eps_max and beta must be >= 0, got {eps_max} and {beta}"
        )));
    }
    if batch.len() != labels.len() {
        return Err(Error::Shape(format!("{} signals vs {} labels", batch.len(), labels.len())));
    }
    if beta == 0.0 || eps_max == 0.0 || batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, &l) in batch.iter().zip(labels) {
        let t = nsr_terms(model, x, l, eps_max)?;
        total += t.ratio + t.hinge;
    }
    Ok(beta * total / batch.len() as f64)
}

fn logits_pair(model: &ClassifierModel, g: &mut Graph) -> Result<(NodeId, NodeId)> {
    let a = g.input("x", model.input_len());
    let b = g.input("x_shifted", model.input_len());
    let pn = model.param_nodes(g);
    Ok((model.add_logits(g, a, &pn)?, model.add_logits(g, b, &pn)?))
}

/// Training surrogate for the Jacobian penalty: with inputs `x` and
/// `x + h u`, `u ~ N(0, I)`, the output is
/// `lambda * ||F(x + h u) - F(x)||^2 / h^2`, whose expectation over `u`
/// approaches `lambda * ||dF/dx||_F^2` as `h -> 0`.
pub(crate) fn jr_training_graph(model: &ClassifierModel, lambda: f64, h: f64) -> Result<Graph> {
    let mut g = model.graph();
    let (za, zb) = logits_pair(model, &mut g)?;
    let fa = g.op(Op::SoftmaxT { x: za, temperature: 1.0 })?;
    let fb = g.op(Op::SoftmaxT { x: zb, temperature: 1.0 })?;
    let d = g.op(Op::Sub(fb, fa))?;
    let sq = g.op(Op::Mul(d, d))?;
    let s = g.op(Op::Sum(sq))?;
    g.op(Op::Scale(s, lambda / (h * h)))?;
    Ok(g)
}

/// Training surrogate for the NSR penalty of one sample. The second input is
/// `x - eps_max * sign(d margin / dx)` computed at the current parameters
/// and held fixed, so `margin(x) - margin(x_shifted)` is the first-order
/// noise term and its parameter gradient follows the worst-case direction.
pub(crate) fn nsr_training_graph(model: &ClassifierModel, label: usize, runner: usize, beta: f64) -> Result<Graph> {
    let k = model.classes();
    let mut w = vec![0.0; k];
    w[label] = 1.0;
    w[runner] = -1.0;
    let w = Arc::new(w);
    let mut g = model.graph();
    let (za, zb) = logits_pair(model, &mut g)?;
    let m = g.op(Op::DotConst {
        x: za,
        weights: w.clone(),
    })?;
    let mb = g.op(Op::DotConst { x: zb, weights: w })?;
    let noise = g.op(Op::Sub(m, mb))?;
    let denom = g.op(Op::AbsFloor {
        x: m,
        floor: NSR_MARGIN_FLOOR,
    })?;
    let ratio = g.op(Op::Div(noise, denom))?;
    let gap = g.op(Op::Sub(noise, m))?;
    let h1 = g.op(Op::Relu(gap))?;
    let neg = g.op(Op::Scale(m, -1.0))?;
    let h2 = g.op(Op::Relu(neg))?;
    let hinge = g.op(Op::Sub(h1, h2))?;
    let total = g.op(Op::Add(ratio, hinge))?;
    g.op(Op::Scale(total, beta))?;
    Ok(g)
}

/// Shifted input for [`nsr_training_graph`] and the runner-up class.
pub(crate) fn nsr_shift(model: &ClassifierModel, x: &[f64], label: usize, eps_max: f64) -> Result<(Vec<f64>, usize)> {
    let (terms, grad) = nsr_terms_with_gradient(model, x, label, eps_max)?;
    let shifted = x
        .iter()
        .zip(&grad)
        .map(|(v, g)| v - eps_max * crate::attacks::sign(*g))
        .collect();
    Ok((shifted, terms.runner_up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::classifier::{build_model, LayerDesc, ModelKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(n: usize, k: usize, seed: u64) -> ClassifierModel {
        ClassifierModel::from_layers(ModelKind::Desk, vec![LayerDesc::Dense { outputs: k }], n, k, seed).unwrap()
    }

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_zero_penalties() {
        let m = build_model("desk", 64, 4, 1).unwrap();
        let x = signal(64, 2);
        assert_eq!(jacobian_penalty(&m, &[&x], 0.0, JacobianMode::Probabilities).unwrap(), 0.0);
        assert_eq!(nsr_penalty(&m, &[&x], &[1], 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(nsr_penalty(&m, &[&x], &[1], 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(nsr_terms(&m, &x, 1, 0.0).unwrap().hinge, 0.0);
    }

    #[test]
    fn linear_logit_jacobian_is_the_weight_matrix() {
        let m = linear(10, 3, 4);
        let x = signal(10, 5);
        let w2: f64 = m.params()[0].iter().map(|v| v * v).sum();
        let p = jacobian_penalty(&m, &[&x, &x], 2.5, JacobianMode::Logits).unwrap();
        assert!((p - 2.5 * w2).abs() < 1e-12 * w2.max(1.0));
    }

    #[test]
    fn desk_jacobian_matches_finite_differences() {
        let m = build_model("desk", 64, 4, 6).unwrap();
        let x = signal(64, 7);
        let exact = jacobian_penalty(&m, &[&x], 1.0, JacobianMode::Probabilities).unwrap();
        let h = 1e-6;
        let mut fd = 0.0;
        for i in 0..64 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let pa = m.probabilities(&a, 1.0).unwrap();
            let pb = m.probabilities(&b, 1.0).unwrap();
            fd += pa.iter().zip(pb.iter()).map(|(u, v)| ((u - v) / (2.0 * h)).powi(2)).sum::<f64>();
        }
        assert!((exact - fd).abs() / exact < 1e-3, "{exact} vs {fd}");
    }

    #[test]
    fn linear_nsr_matches_closed_form() {
        let (n, k) = (12, 4);
        let m = linear(n, k, 8);
        let x = signal(n, 9);
        let (w, b) = (&m.params()[0], &m.params()[1]);
        let label = 2;
        let z: Vec<f64> = (0..k).map(|i| (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>() + b[i]).collect();
        let j = (0..k).filter(|&i| i != label).max_by(|&a, &c| z[a].total_cmp(&z[c])).unwrap();
        let margin = z[label] - z[j];
        let eps = 0.3;
        let noise = eps * (0..n).map(|c| (w[label * n + c] - w[j * n + c]).abs()).sum::<f64>();
        let ratio = noise / margin.abs();
        let hinge = (noise - margin).max(0.0) - (-margin).max(0.0);
        let got = nsr_penalty(&m, &[&x], &[label], eps, 1.7).unwrap();
        assert!((got - 1.7 * (ratio + hinge)).abs() < 1e-10 * got.abs().max(1.0));

        // The training surrogate is exact for a linear model.
        let (shifted, runner) = nsr_shift(&m, &x, label, eps).unwrap();
        assert_eq!(runner, j);
        let g = nsr_training_graph(&m, label, runner, 1.7).unwrap();
        let v = g.evaluate(m.params(), &[&x, &shifted]).unwrap();
        assert!((v - got).abs() < 1e-9 * got.abs().max(1.0));
    }

    #[test]
    fn surrogate_graphs_have_correct_gradients() {
        let m = build_model("desk", 64, 4, 10).unwrap();
        let x = signal(64, 11);
        let xs: Vec<f64> = x.iter().map(|v| v + 0.01).collect();
        let g = jr_training_graph(&m, 3.0, 0.05).unwrap();
        assert!(finite_difference_check(&g, m.params(), &[&x, &xs], 1e-6).unwrap() < 1e-4);
        let (shifted, runner) = nsr_shift(&m, &x, 0, 0.05).unwrap();
        let g = nsr_training_graph(&m, 0, runner, 1.0).unwrap();
        assert!(finite_difference_check(&g, m.params(), &[&x, &shifted], 1e-6).unwrap() < 1e-4);
    }
}
