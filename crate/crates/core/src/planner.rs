//! Point-based value iteration for VAR-POMDPs.
//!
//! The `t`-step value is represented by alpha vectors,
//! `V_t(b) = max_k Σ_s b_s α^{t,k}_s`, which do not depend on the
//! observation history. A backup at belief point `b̃` and action `a` needs
//! the probability that the next observation falls into the region `z_k`
//! where the previous alpha vector `k` wins:
//!
//! ```text
//! z_k = { ô : argmax_l Σ_s b̃_s Σ_{s''} T[a][s][s''] N(ô; 0, Σ_{s''}) α^{t-1,l}_{s''} = k }
//! Pr(z_k | s') ≈ (# of L draws ô ~ N(0, Σ_{s'}) landing in z_k) / L
//! α^t_s       = Σ_k Σ_{s'} T[a][s][s'] α^{t-1,k}_{s'} Pr(z_k | s')
//! ```
//!
//! The region classifier uses zero-mean densities for every state, i.e.
//! the lag-shifted frame `ô = o' − Σ_j A_{j,s'} o_{t-j}`. When lag matrices
//! differ between states this is an approximation of the exact integral.
//!
//! One vector is kept per belief point (the action maximizing the value at
//! that point), so a set never exceeds `M`. Identical vectors coming from
//! different points are kept unless deduplication is requested.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Belief, VarPomdpModel};
use crate::stats::{self, Gaussian, RngStream};

/// Default number of Monte Carlo draws per `(belief, action, next state)`.
pub const DEFAULT_MC_SAMPLES: usize = 1000;

/// Worst-case standard error of a binomial proportion estimated from `samples` draws,
/// times three.
pub fn mc_tolerance(samples: usize) -> f64 {
    3.0 * (0.25 / samples as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub alpha: Vec<f64>,
    pub action: usize,
    pub source_belief: usize,
}

/// Alpha vectors for one step-to-go `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVectorSet {
    #[serde(rename = "t")]
    pub step: usize,
    pub vectors: Vec<AlphaVector>,
}

impl AlphaVectorSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Index of the maximizing vector at `belief`; ties go to the lowest index.
    pub fn best_index(&self, belief: &Belief) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in self.vectors.iter().enumerate() {
            if v.alpha.len() != belief.len() {
                return Err(Error::Dimension(format!(
                    "alpha vector has {} entries, belief {}",
                    v.alpha.len(),
                    belief.len()
                )));
            }
            let val = belief.dot(&v.alpha);
            if best.is_none_or(|(_, b)| val > b) {
                best = Some((k, val));
            }
        }
        best.map(|(k, _)| k).ok_or(Error::EmptyAlphaSet)
    }
}

/// `max_k b · α^k`.
pub fn value_at(alphas: &AlphaVectorSet, belief: &Belief) -> Result<f64> {
    let k = alphas.best_index(belief)?;
    Ok(belief.dot(&alphas.vectors[k].alpha))
}

/// Action recorded on the maximizing vector.
pub fn extract_action(alphas: &AlphaVectorSet, belief: &Belief) -> Result<usize> {
    Ok(alphas.vectors[alphas.best_index(belief)?].action)
}

/// Belief points at which backups are performed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefSet {
    pub points: Vec<Belief>,
}

impl BeliefSet {
    /// Keeps the first occurrence of exact duplicates.
    pub fn new(points: Vec<Belief>) -> Result<Self> {
        let mut out: Vec<Belief> = Vec::with_capacity(points.len());
        for p in points {
            if let Some(first) = out.first() {
                if first.len() != p.len() {
                    return Err(Error::Dimension("belief points differ in length".into()));
                }
            }
            if !out.contains(&p) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter("belief set is empty".into()));
        }
        Ok(Self { points: out })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.points[0].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BeliefStrategy {
    Given(Vec<Belief>),
    /// All unit beliefs, then uniform draws from the simplex.
    CornersPlusRandom,
    /// Grows the set with one-step successors of existing points under
    /// random actions and simulated (lag-shifted) observations.
    SimulationExpansion,
}

pub fn select_belief_points(
    model: &VarPomdpModel,
    strategy: &BeliefStrategy,
    m: usize,
    rng: &RngStream,
) -> Result<BeliefSet> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one belief point".into()));
    }
    let n = model.num_states;
    match strategy {
        BeliefStrategy::Given(points) => {
            if let Some(p) = points.iter().find(|p| p.len() != n) {
                return Err(Error::Dimension(format!(
                    "belief point has {} entries for {n} states",
                    p.len()
                )));
            }
            BeliefSet::new(points.clone())
        }
        BeliefStrategy::CornersPlusRandom => {
            if m < n {
                return Err(Error::InvalidParameter(format!(
                    "corners-plus-random needs M >= |S| ({m} < {n})"
                )));
            }
            let mut points: Vec<Belief> = (0..n).map(|s| Belief::unit(n, s)).collect();
            let mut r = rng.rng();
            while points.len() < m {
                let b = Belief::normalized(stats::uniform_simplex_sample(n, &mut r))?;
                if !points.contains(&b) {
                    points.push(b);
                }
            }
            BeliefSet::new(points)
        }
        BeliefStrategy::SimulationExpansion => simulation_expansion(model, m, rng),
    }
}

fn simulation_expansion(model: &VarPomdpModel, m: usize, rng: &RngStream) -> Result<BeliefSet> {
    let kernels = ZeroMeanKernels::new(model)?;
    let n = model.num_states;
    let mut r = rng.rng();
    let mut points = vec![Belief::uniform(n)];
    let mut stalled = 0;
    while points.len() < m && stalled < 50 {
        let mut fresh = Vec::new();
        for b in &points {
            // Keep the successor farthest from the current set.
            let mut best: Option<(f64, Belief)> = None;
            for _ in 0..model.num_actions.max(1) {
                let a = r.random_range(0..model.num_actions);
                let s = stats::sample_categorical(b.probs(), &mut r);
                let s_next = stats::sample_categorical(&model.transitions[a][s], &mut r);
                let obs = kernels.gaussians[s_next].sample_centered(&mut r);
                let prior = model.predict(b.probs(), a);
                let loglik = kernels.log_densities(&obs);
                let logs: Vec<f64> = prior
                    .iter()
                    .zip(&loglik)
                    .map(|(&p, &l)| if p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY })
                    .collect();
                let succ = Belief::normalized(stats::normalize_log(&logs))?;
                let dist = points
                    .iter()
                    .chain(&fresh)
                    .map(|p| p.l1_distance(&succ))
                    .fold(f64::INFINITY, f64::min);
                if dist > 0.0 && best.as_ref().is_none_or(|(d, _)| dist > *d) {
                    best = Some((dist, succ));
                }
            }
            if let Some((_, b)) = best {
                fresh.push(b);
            }
        }
        if fresh.is_empty() {
            stalled += 1;
        }
        for b in fresh {
            if points.len() < m && !points.contains(&b) {
                points.push(b);
            }
        }
    }
    // Degenerate models (e.g. one reachable belief) are topped up uniformly.
    while points.len() < m && n > 1 {
        let b = Belief::normalized(stats::uniform_simplex_sample(n, &mut r))?;
        if !points.contains(&b) {
            points.push(b);
        }
    }
    BeliefSet::new(points)
}

/// Zero-mean emission densities `N(·; 0, Σ_s)` for every state.
#[derive(Debug, Clone)]
pub struct ZeroMeanKernels {
    gaussians: Vec<Gaussian>,
}

impl ZeroMeanKernels {
    pub fn new(model: &VarPomdpModel) -> Result<Self> {
        let gaussians = model
            .emissions
            .iter()
            .enumerate()
            .map(|(s, e)| {
                Gaussian::new(&e.noise_cov).map_err(|_| {
                    Error::NotPositiveDefinite(format!("noise covariance of state {s}"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { gaussians })
    }

    pub fn log_densities(&self, obs: &nalgebra::DVector<f64>) -> Vec<f64> {
        self.gaussians.iter().map(|g| g.logpdf_centered(obs)).collect()
    }
}

/// Index of the winning previous alpha vector for a lag-shifted observation.
fn classify(weights: &[f64], log_dens: &[f64], alphas: &AlphaVectorSet) -> usize {
    // Common rescaling by the largest density leaves the argmax unchanged.
    let top = weights
        .iter()
        .zip(log_dens)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mass: Vec<f64> = weights
        .iter()
        .zip(log_dens)
        .map(|(&w, &l)| if w > 0.0 { w * (l - top).exp() } else { 0.0 })
        .collect();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, v) in alphas.vectors.iter().enumerate() {
        let score: f64 = mass.iter().zip(&v.alpha).map(|(m, a)| m * a).sum();
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

/// Region hit counts `[s'][k]` for one `(belief point, action)` pair.
fn region_counts(
    model: &VarPomdpModel,
    kernels: &ZeroMeanKernels,
    belief: &Belief,
    action: usize,
    alphas_prev: &AlphaVectorSet,
    samples: usize,
    rng: &RngStream,
) -> Vec<Vec<u32>> {
    let weights = model.predict(belief.probs(), action);
    (0..model.num_states)
        .map(|s_next| {
            let mut counts = vec![0u32; alphas_prev.len()];
            let mut r = rng.substream(&[s_next as u64]).rng();
            for _ in 0..samples {
                let obs = kernels.gaussians[s_next].sample_centered(&mut r);
                let k = classify(&weights, &kernels.log_densities(&obs), alphas_prev);
                counts[k] += 1;
            }
            counts
        })
        .collect()
}

/// Monte Carlo estimate of `Pr(z_k | s')` for every next state `s'` (rows)
/// and previous alpha vector `k` (columns).
pub fn estimate_partition_probs(
    model: &VarPomdpModel,
    belief: &Belief,
    action: usize,
    alphas_prev: &AlphaVectorSet,
    samples: usize,
    rng: &RngStream,
) -> Result<Vec<Vec<f64>>> {
    if alphas_prev.is_empty() {
        return Err(Error::EmptyAlphaSet);
    }
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one Monte Carlo sample".into()));
    }
    if action >= model.num_actions || belief.len() != model.num_states {
        return Err(Error::Dimension("belief or action does not match the model".into()));
    }
    let kernels = ZeroMeanKernels::new(model)?;
    let counts = region_counts(model, &kernels, belief, action, alphas_prev, samples, rng);
    Ok(counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / samples as f64).collect())
        .collect())
}

/// Region counts for every `[belief point][action][s'][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionProbs {
    pub samples: usize,
    pub counts: Vec<Vec<Vec<Vec<u32>>>>,
}

impl PartitionProbs {
    pub fn prob(&self, point: usize, action: usize, next: usize, region: usize) -> f64 {
        self.counts[point][action][next][region] as f64 / self.samples as f64
    }

    /// Estimates all tables; belief points run in parallel on derived substreams.
    pub fn estimate(
        model: &VarPomdpModel,
        belief_set: &BeliefSet,
        alphas_prev: &AlphaVectorSet,
        samples: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        if alphas_prev.is_empty() {
            return Err(Error::EmptyAlphaSet);
        }
        let kernels = ZeroMeanKernels::new(model)?;
        let counts = (0..belief_set.len())
            .into_par_iter()
            .map(|i| {
                (0..model.num_actions)
                    .map(|a| {
                        let sub = rng.substream(&[i as u64, a as u64]);
                        region_counts(
                            model,
                            &kernels,
                            &belief_set.points[i],
                            a,
                            alphas_prev,
                            samples,
                            &sub,
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Self { samples, counts })
    }
}

fn dedup_key(alpha: &[f64]) -> Vec<i64> {
    alpha.iter().map(|v| (v * 1e12).round() as i64).collect()
}

/// One backup over the belief set.
///
/// Without `partition` this is the first step, whose candidate per action is
/// `T_a · p0` (the observation integral marginalizes to one). With a
/// partition table, candidates use `Σ_k Σ_{s'} T[a][s][s'] α^{t-1,k}_{s'} Pr(z_k|s')`.
pub fn backup(
    model: &VarPomdpModel,
    belief_set: &BeliefSet,
    alphas_prev: &AlphaVectorSet,
    partition: Option<&PartitionProbs>,
    p0: &[f64],
    dedup: bool,
) -> Result<AlphaVectorSet> {
    let n = model.num_states;
    if p0.len() != n || belief_set.num_states() != n {
        return Err(Error::Dimension("p0 or belief set does not match the model".into()));
    }
    let mut vectors: Vec<AlphaVector> = Vec::with_capacity(belief_set.len());
    let mut seen = std::collections::HashSet::new();
    for (i, b) in belief_set.points.iter().enumerate() {
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for a in 0..model.num_actions {
            // g_{s'} = Σ_k α^{t-1,k}_{s'} Pr(z_k | s')
            let g: Vec<f64> = match partition {
                None => p0.to_vec(),
                Some(pp) => (0..n)
                    .map(|s_next| {
                        let weighted: f64 = pp.counts[i][a][s_next]
                            .iter()
                            .zip(&alphas_prev.vectors)
                            .map(|(&c, v)| c as f64 * v.alpha[s_next])
                            .sum();
                        weighted / pp.samples as f64
                    })
                    .collect(),
            };
            let alpha: Vec<f64> = (0..n)
                .map(|s| {
                    model.transitions[a][s]
                        .iter()
                        .zip(&g)
                        .map(|(t, gv)| t * gv)
                        .sum::<f64>()
                        .clamp(0.0, 1.0)
                })
                .collect();
            let val = b.dot(&alpha);
            if best.as_ref().is_none_or(|(v, _, _)| val > *v) {
                best = Some((val, alpha, a));
            }
        }
        let (_, alpha, action) = best.expect("model has at least one action");
        if !dedup || seen.insert(dedup_key(&alpha)) {
            vectors.push(AlphaVector {
                alpha,
                action,
                source_belief: i,
            });
        }
    }
    Ok(AlphaVectorSet {
        step: alphas_prev.step + 1,
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub mc_samples: usize,
    pub seed: u64,
    /// Drop vectors equal (after rounding to 1e-12) to one already kept.
    pub dedup: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            dedup: false,
        }
    }
}

/// Runs `horizon` backups from `α^{0} = p0`; returns the sets for `t = 0..=horizon`.
///
/// `model` must already be absorbing-transformed. Results depend only on
/// the inputs and `config.seed`, not on the number of worker threads.
pub fn pbvi(
    model: &VarPomdpModel,
    p0: &[f64],
    horizon: usize,
    belief_set: &BeliefSet,
    config: &PlannerConfig,
) -> Result<Vec<AlphaVectorSet>> {
    if config.mc_samples == 0 {
        return Err(Error::InvalidParameter("need at least one Monte Carlo sample".into()));
    }
    if belief_set.num_states() != model.num_states {
        return Err(Error::Dimension(format!(
            "belief points have {} entries for {} states",
            belief_set.num_states(),
            model.num_states
        )));
    }
    if p0.len() != model.num_states {
        return Err(Error::Dimension("p0 does not match the model".into()));
    }
    let root = RngStream::new(config.seed);
    let mut sets = vec![AlphaVectorSet {
        step: 0,
        vectors: vec![AlphaVector {
            alpha: p0.to_vec(),
            action: 0,
            source_belief: 0,
        }],
    }];
    for t in 1..=horizon {
        let prev = sets.last().expect("non-empty");
        let next = if t == 1 {
            backup(model, belief_set, prev, None, p0, config.dedup)?
        } else {
            let pp = PartitionProbs::estimate(
                model,
                belief_set,
                prev,
                config.mc_samples,
                &root.substream(&[t as u64]),
            )?;
            backup(model, belief_set, prev, Some(&pp), p0, config.dedup)?
        };
        sets.push(next);
    }
    Ok(sets)
}

/// Estimates `ε_B = max_{b' ∈ Δ} min_{b ∈ B} ||b − b'||₁`.
///
/// Probes are a fine grid for up to three states plus `num_probe_samples`
/// uniform simplex draws, so the result is a lower estimate of the true
/// supremum that becomes exact on the grid.
pub fn belief_set_density(
    belief_set: &BeliefSet,
    num_probe_samples: usize,
    rng: &RngStream,
) -> f64 {
    let n = belief_set.num_states();
    let nearest = |probe: &[f64]| -> f64 {
        belief_set
            .points
            .iter()
            .map(|b| b.probs().iter().zip(probe).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    };
    let mut worst: f64 = 0.0;
    for s in 0..n {
        let mut corner = vec![0.0; n];
        corner[s] = 1.0;
        worst = worst.max(nearest(&corner));
    }
    match n {
        2 => {
            let steps = 10_000;
            for i in 0..=steps {
                let x = i as f64 / steps as f64;
                worst = worst.max(nearest(&[x, 1.0 - x]));
            }
        }
        3 => {
            let steps = 300;
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let x = i as f64 / steps as f64;
                    let y = j as f64 / steps as f64;
                    worst = worst.max(nearest(&[x, y, (1.0 - x - y).max(0.0)]));
                }
            }
        }
        _ => {}
    }
    let mut r = rng.rng();
    for _ in 0..num_probe_samples {
        worst = worst.max(nearest(&stats::uniform_simplex_sample(n, &mut r)));
    }
    worst
}

/// Fully observable finite-horizon reach values,
/// `V_{t+1}(s) = max_a Σ_{s'} T[a][s][s'] V_t(s')` with `V_0 = p0`.
pub fn mdp_upper_bound(model: &VarPomdpModel, p0: &[f64], horizon: usize) -> Vec<f64> {
    let mut v = p0.to_vec();
    for _ in 0..horizon {
        v = (0..model.num_states)
            .map(|s| {
                (0..model.num_actions)
                    .map(|a| {
                        model.transitions[a][s]
                            .iter()
                            .zip(&v)
                            .map(|(t, x)| t * x)
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v
}
