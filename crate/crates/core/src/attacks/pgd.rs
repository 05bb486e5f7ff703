use super::{sign, smooth_perturbation, AdversarialExample, AttackParams, AttackSpec, ClipAnchor, Provenance};
use crate::autodiff::{Graph, Op};
use crate::classifier::{ClassifierModel, LabelVector};
use crate::error::{Error, Result};

fn check_gradient(g: &[f64], stage: &str, step: usize) -> Result<()> {
    if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
        return Err(Error::Attack(format!("non-finite gradient ({bad}) in {stage} iteration {step}")));
    }
    Ok(())
}

/// Runs the PGD iterations and returns the raw perturbation `x'_t - x`.
fn pgd_delta(model: &ClassifierModel, x: &[f64], target: &LabelVector, params: &AttackParams) -> Result<Vec<f64>> {
    params.validate()?;
    if x.len() != model.input_len() {
        return Err(Error::Shape(format!("signal length {} vs model input {}", x.len(), model.input_len())));
    }
    let graph = model.loss_graph(target, params.temperature)?;
    let mut cur = x.to_vec();
    for step in 0..params.pgd_steps {
        let bundle = graph.evaluate_with_gradients(model.params(), &[&cur])?;
        let grad = &bundle.inputs[0];
        check_gradient(grad, "pgd", step)?;
        let eps = params.epsilon;
        for ((c, &g), &x0) in cur.iter_mut().zip(grad).zip(x) {
            let candidate = *c + params.alpha * sign(g);
            let anchor = match params.anchor {
                ClipAnchor::Previous => *c,
                ClipAnchor::Original => x0,
            };
            *c = candidate.clamp(anchor - eps, anchor + eps);
        }
    }
    let delta = cur.iter().zip(x).map(|(a, b)| a - b);
    Ok(match params.anchor {
        // The subtraction can round one ulp past the budget.
        ClipAnchor::Original => delta.map(|d| d.clamp(-params.epsilon, params.epsilon)).collect(),
        ClipAnchor::Previous => delta.collect(),
    })
}

/// Non-targeted PGD: `t` sign-gradient ascent steps on the loss, each
/// followed by Clip around the anchor selected in `params`.
pub fn pgd_attack(
    model: &ClassifierModel,
    x: &[f64],
    target: &LabelVector,
    params: &AttackParams,
) -> Result<AdversarialExample> {
    let delta = pgd_delta(model, x, target, params)?;
    let provenance = Provenance {
        spec: AttackSpec::Pgd(params.clone()),
        source_model: model.fingerprint(),
    };
    Ok(AdversarialExample::new(x, delta.clone(), delta, provenance))
}

/// Smooth adversarial perturbation.
///
/// Stage one is PGD. Stage two updates the perturbation `delta` for `t'`
/// steps by sign-gradient ascent of the loss evaluated at
/// `x + smooth(delta)`, with Clip around the previous `delta` (or around
/// zero in [`ClipAnchor::Original`] mode). The applied perturbation is
/// `smooth(delta)`. With `t' = 0` no smoothing is applied and the result
/// equals [`pgd_attack`].
pub fn sap_attack(
    model: &ClassifierModel,
    x: &[f64],
    target: &LabelVector,
    params: &AttackParams,
) -> Result<AdversarialExample> {
    let bank = params.kernel_bank()?;
    if x.len() < bank.max_len() {
        return Err(Error::InvalidArgument(format!(
            "signal length {} shorter than largest kernel {}",
            x.len(),
            bank.max_len()
        )));
    }
    let mut delta = pgd_delta(model, x, target, params)?;
    let provenance = Provenance {
        spec: AttackSpec::Sap(params.clone()),
        source_model: model.fingerprint(),
    };
    if params.smooth_steps == 0 {
        return Ok(AdversarialExample::new(x, delta.clone(), delta, provenance));
    }

    let mut g = model.graph();
    let d = g.input("delta", x.len());
    let xc = g.constant(x.to_vec());
    let smoothed = g.op(Op::KernelAverage {
        x: d,
        kernels: std::sync::Arc::new(bank.kernels().to_vec()),
    })?;
    let xa = g.op(Op::Add(xc, smoothed))?;
    let pn = model.param_nodes(&mut g);
    let z = model.add_logits(&mut g, xa, &pn)?;
    model.add_loss(&mut g, z, target, params.temperature)?;
    let graph: Graph = g;

    let eps = params.epsilon;
    for step in 0..params.smooth_steps {
        let bundle = graph.evaluate_with_gradients(model.params(), &[&delta])?;
        let grad = &bundle.inputs[0];
        check_gradient(grad, "sap", step)?;
        for (dv, &gv) in delta.iter_mut().zip(grad) {
            let candidate = *dv + params.alpha * sign(gv);
            let anchor = match params.anchor {
                ClipAnchor::Previous => *dv,
                ClipAnchor::Original => 0.0,
            };
            *dv = candidate.clamp(anchor - eps, anchor + eps);
        }
    }
    let applied = smooth_perturbation(&delta, &bank)?;
    Ok(AdversarialExample::new(x, delta, applied, provenance))
}
