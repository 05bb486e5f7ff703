//! Decision-based boundary attack with low-pass (Hanning) proposals.
//!
//! The walk starts at a sample the oracle already assigns to the target
//! class and only ever accepts candidates that (a) are still assigned to
//! the target class and (b) are no farther from the victim than the current
//! point. Each proposal is an orthogonal step along a Hanning-smoothed
//! Gaussian direction on the sphere around the victim, followed by a step
//! toward the victim. Both step sizes adapt so that roughly a target
//! fraction of proposals is accepted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{hanning_filter, AdversarialExample, AttackSpec, Provenance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryParams {
    /// Maximum number of oracle queries, including the initial seed check.
    pub budget: usize,
    /// Orthogonal step, relative to the current distance.
    pub orthogonal_step: f64,
    /// Step toward the victim, relative to the current distance.
    pub source_step: f64,
    /// Odd Hanning window length applied to every random direction.
    pub hanning_window: usize,
    /// Proposals per step-size adaptation.
    pub adapt_every: usize,
    pub target_acceptance: f64,
    pub adapt_factor: f64,
    /// Bisection steps along the seed-victim line before the random walk.
    pub line_search_steps: usize,
    pub seed: u64,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            budget: 2000,
            orthogonal_step: 0.05,
            source_step: 0.05,
            hanning_window: 21,
            adapt_every: 20,
            target_acceptance: 0.25,
            adapt_factor: 1.5,
            line_search_steps: 12,
            seed: 0,
        }
    }
}

impl BoundaryParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.budget == 0 {
            v.push("boundary budget must be > 0".into());
        }
        if self.hanning_window % 2 == 0 {
            v.push(format!("hanning window {} must be odd", self.hanning_window));
        }
        if !(self.orthogonal_step > 0.0 && self.source_step > 0.0) {
            v.push("boundary step sizes must be > 0".into());
        }
        if !(self.adapt_factor > 1.0) {
            v.push("adapt factor must be > 1".into());
        }
        if !(0.0..1.0).contains(&self.target_acceptance) {
            v.push("target acceptance must lie in [0,1)".into());
        }
        if self.adapt_every == 0 {
            v.push("adapt_every must be > 0".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOutcome {
    pub example: AdversarialExample,
    pub target: usize,
    pub queries: usize,
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Distance to the victim after every accepted step (starts with the seed).
    pub accepted_distances: Vec<f64>,
    /// False when the budget ran out without any accepted step.
    pub improved: bool,
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn adapt(step: f64, grow: bool, factor: f64) -> f64 {
    if grow {
        step * factor
    } else {
        step / factor
    }
}

fn offset(victim: &[f64], delta: &[f64]) -> Vec<f64> {
    victim.iter().zip(delta).map(|(v, d)| v + d).collect()
}

/// Walks `seed_sample`, which `query` must assign to `target`, toward
/// `victim` while keeping the target classification.
///
/// The walk state is the offset from the victim, and every queried point is
/// `victim + offset`, so the returned example is exactly a queried point.
pub fn boundary_attack<Q>(
    mut query: Q,
    victim: &[f64],
    seed_sample: &[f64],
    target: usize,
    params: &BoundaryParams,
    source_model: &str,
) -> Result<BoundaryOutcome>
where
    Q: FnMut(&[f64]) -> Result<usize>,
{
    let v = params.violations();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    if victim.len() != seed_sample.len() {
        return Err(Error::Shape(format!(
            "victim length {} vs seed length {}",
            victim.len(),
            seed_sample.len()
        )));
    }
    let mut queries = 0usize;
    let mut ask = |x: &[f64], queries: &mut usize| -> Result<usize> {
        *queries += 1;
        query(x)
    };
    let seed_delta: Vec<f64> = seed_sample.iter().zip(victim).map(|(s, v)| s - v).collect();
    let seed_class = ask(&offset(victim, &seed_delta), &mut queries)?;
    if seed_class != target {
        return Err(Error::Attack(format!(
            "seed sample is classified as {seed_class}, not target class {target}"
        )));
    }
    if ask(victim, &mut queries)? == target {
        return Err(Error::Attack(format!("victim is already classified as target class {target}")));
    }

    let n = victim.len();
    let mut current = seed_delta.clone();
    let initial_distance = norm(&current);
    let mut accepted = vec![initial_distance];
    let mut improved = false;

    // Bisection on the scale of the seed offset.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..params.line_search_steps {
        if queries >= params.budget {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let cand: Vec<f64> = seed_delta.iter().map(|d| mid * d).collect();
        if ask(&offset(victim, &cand), &mut queries)? == target {
            hi = mid;
            let d = norm(&cand);
            if d <= *accepted.last().unwrap() {
                current = cand;
                accepted.push(d);
                improved = true;
            }
        } else {
            lo = mid;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut orth = params.orthogonal_step;
    let mut src = params.source_step;
    let (mut orth_trials, mut orth_hits) = (0usize, 0usize);
    let (mut src_trials, mut src_hits) = (0usize, 0usize);
    let mut proposals = 0usize;
    while queries < params.budget && proposals < 10 * params.budget {
        proposals += 1;
        let d = norm(&current);
        if d == 0.0 {
            break;
        }
        let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut dir = hanning_filter(&raw, params.hanning_window)?;
        // Remove the radial component so the step is tangent to the sphere.
        let proj: f64 = dir.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>() / d;
        dir.iter_mut().zip(&current).for_each(|(a, c)| *a -= proj * c / d);
        let dn = norm(&dir);
        if dn == 0.0 {
            continue;
        }
        let scale = orth * d / dn;
        let mut cand: Vec<f64> = current.iter().zip(&dir).map(|(c, a)| c + scale * a).collect();
        // Back onto the sphere of radius d.
        let back = d / norm(&cand);
        cand.iter_mut().for_each(|c| *c *= back);
        let on_sphere = ask(&offset(victim, &cand), &mut queries)? == target;
        orth_trials += 1;
        if on_sphere {
            orth_hits += 1;
            if queries < params.budget {
                cand.iter_mut().for_each(|c| *c *= 1.0 - src);
                let dnew = norm(&cand);
                src_trials += 1;
                if dnew <= d && ask(&offset(victim, &cand), &mut queries)? == target {
                    src_hits += 1;
                    current = cand;
                    accepted.push(dnew);
                    improved = true;
                }
            }
        }
        if orth_trials == params.adapt_every {
            let rate = orth_hits as f64 / orth_trials as f64;
            orth = adapt(orth, rate > 2.0 * params.target_acceptance, params.adapt_factor).clamp(1e-6, 1.0);
            (orth_trials, orth_hits) = (0, 0);
        }
        if src_trials == params.adapt_every {
            let rate = src_hits as f64 / src_trials as f64;
            src = adapt(src, rate > params.target_acceptance, params.adapt_factor).clamp(1e-6, 0.5);
            (src_trials, src_hits) = (0, 0);
        }
    }

    let final_distance = norm(&current);
    let provenance = Provenance {
        spec: AttackSpec::Boundary(params.clone()),
        source_model: source_model.to_string(),
    };
    Ok(BoundaryOutcome {
        example: AdversarialExample::new(victim, current.clone(), current, provenance),
        target,
        queries,
        initial_distance,
        final_distance,
        accepted_distances: accepted,
        improved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linear two-class oracle on the mean of the signal.
    fn oracle(x: &[f64]) -> Result<usize> {
        Ok(usize::from(x.iter().sum::<f64>() / x.len() as f64 > 0.5))
    }

    #[test]
    fn accepted_samples_stay_on_target_and_approach_victim() {
        let victim = vec![0.0; 64];
        let seed: Vec<f64> = (0..64).map(|i| 1.0 + 0.3 * (i as f64 * 0.4).sin()).collect();
        let p = BoundaryParams {
            budget: 600,
            seed: 3,
            ..Default::default()
        };
        let out = boundary_attack(oracle, &victim, &seed, 1, &p, "m").unwrap();
        assert_eq!(out.target, 1);
        assert_eq!(oracle(&out.example.adversarial).unwrap(), 1);
        assert!(out.accepted_distances.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.final_distance < out.initial_distance);
        assert!(out.queries <= p.budget);
    }

    #[test]
    fn seed_outside_target_class_is_an_error() {
        let victim = vec![0.0; 32];
        let seed = vec![2.0; 32];
        assert!(boundary_attack(oracle, &victim, &seed, 0, &BoundaryParams::default(), "m").is_err());
        let victim = vec![1.0; 32];
        assert!(boundary_attack(oracle, &victim, &seed, 1, &BoundaryParams::default(), "m").is_err());
    }
}
