//! Point-based backups for scalar observations with region probabilities
//! computed by 1-d integration instead of sampling.
//!
//! With zero-mean Gaussian kernels the winning vector depends on `|ô|`
//! only, so each region is a union of intervals of `u = |ô|`. Breakpoints
//! are bracketed on a grid and refined by bisection; interval masses are
//! `2·(Φ(u_b/σ) − Φ(u_a/σ))`.

use statrs::distribution::{ContinuousCDF, Normal};
use varpomdp::{AlphaVectorSet, Belief, VarPomdpModel};

fn density(u: f64, sigma: f64) -> f64 {
    (-0.5 * (u / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn sigmas(model: &VarPomdpModel) -> Vec<f64> {
    assert_eq!(model.obs_dim, 1, "oracle handles scalar observations only");
    model
        .emissions
        .iter()
        .map(|e| e.noise_cov[(0, 0)].sqrt())
        .collect()
}

fn winner(u: f64, weights: &[f64], sig: &[f64], alphas: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, a) in alphas.iter().enumerate() {
        let score: f64 = (0..sig.len())
            .map(|s| weights[s] * density(u, sig[s]) * a[s])
            .sum();
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

/// Sorted `(start, end, region)` intervals of `u ∈ [0, ∞)`.
fn intervals(weights: &[f64], sig: &[f64], alphas: &[Vec<f64>]) -> Vec<(f64, f64, usize)> {
    let top = sig.iter().cloned().fold(0.0, f64::max) * 12.0;
    let steps = 4000;
    let mut out = Vec::new();
    let mut start = 0.0;
    let mut cur = winner(0.0, weights, sig, alphas);
    let mut prev_u = 0.0;
    for i in 1..=steps {
        let u = top * i as f64 / steps as f64;
        let k = winner(u, weights, sig, alphas);
        if k != cur {
            let (mut lo, mut hi) = (prev_u, u);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if winner(mid, weights, sig, alphas) == cur {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push((start, hi, cur));
            start = hi;
            cur = winner(hi, weights, sig, alphas);
        }
        prev_u = u;
    }
    out.push((start, f64::INFINITY, cur));
    out
}

/// `Pr(z_k | s')` for every next state (rows) and vector (columns).
pub fn region_probs(
    model: &VarPomdpModel,
    belief: &Belief,
    action: usize,
    prev: &AlphaVectorSet,
) -> Vec<Vec<f64>> {
    let sig = sigmas(model);
    let n = model.num_states;
    let mut weights = vec![0.0; n];
    for s in 0..n {
        for (s2, w) in weights.iter_mut().enumerate() {
            *w += belief.probs()[s] * model.transitions[action][s][s2];
        }
    }
    let alphas: Vec<Vec<f64>> = prev.vectors.iter().map(|v| v.alpha.clone()).collect();
    let parts = intervals(&weights, &sig, &alphas);
    sig.iter()
        .map(|&sd| {
            let normal = Normal::new(0.0, sd).unwrap();
            let mut p = vec![0.0; alphas.len()];
            for &(a, b, k) in &parts {
                let upper = if b.is_finite() { normal.cdf(b) } else { 1.0 };
                p[k] += 2.0 * (upper - normal.cdf(a));
            }
            p
        })
        .collect()
}

/// Exact backup at one belief: `(value, alpha, action)` of the best action.
pub fn backup_at(
    model: &VarPomdpModel,
    belief: &Belief,
    prev: &AlphaVectorSet,
    p0: &[f64],
    first: bool,
) -> (f64, Vec<f64>, usize) {
    let n = model.num_states;
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for a in 0..model.num_actions {
        let g: Vec<f64> = if first {
            p0.to_vec()
        } else {
            let pr = region_probs(model, belief, a, prev);
            (0..n)
                .map(|s2| {
                    prev.vectors
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v.alpha[s2] * pr[s2][k])
                        .sum()
                })
                .collect()
        };
        let alpha: Vec<f64> = (0..n)
            .map(|s| (0..n).map(|s2| model.transitions[a][s][s2] * g[s2]).sum())
            .collect();
        let value = belief.dot(&alpha);
        if best.as_ref().is_none_or(|(v, _, _)| value > *v) {
            best = Some((value, alpha, a));
        }
    }
    best.unwrap()
}

/// Point-based value iteration with exact region probabilities.
pub fn pbvi(
    model: &VarPomdpModel,
    p0: &[f64],
    horizon: usize,
    points: &[Belief],
) -> Vec<AlphaVectorSet> {
    let mut sets = vec![AlphaVectorSet {
        step: 0,
        vectors: vec![varpomdp::AlphaVector {
            alpha: p0.to_vec(),
            action: 0,
            source_belief: 0,
        }],
    }];
    for t in 1..=horizon {
        let prev = sets.last().unwrap();
        let vectors = points
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let (_, alpha, action) = backup_at(model, b, prev, p0, t == 1);
                varpomdp::AlphaVector {
                    alpha,
                    action,
                    source_belief: i,
                }
            })
            .collect();
        sets.push(AlphaVectorSet { step: t, vectors });
    }
    sets
}
