//! Trajectory generation from a VAR-POMDP and random synthetic corpora.
//!
//! The first observation is drawn with a history of `r` zero vectors
//! unless an explicit history is supplied.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{belief_update, Belief, Emission, ObsHistory, Trajectory, VarPomdpModel};
use crate::planner::{self, AlphaVectorSet};
use crate::stats::{self, Gaussian, RngStream};

/// How actions are chosen while simulating.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// `actions[t]` at step `t`; must cover every step.
    Fixed(Vec<usize>),
    UniformRandom,
    /// Alpha sets for `t = 0..=H` as returned by the planner. The simulator
    /// tracks the belief and acts with the set for the remaining steps to
    /// go, falling back to `t = 1` once the horizon is exhausted.
    Alpha(Vec<AlphaVectorSet>),
}

pub fn simulate(
    model: &VarPomdpModel,
    policy: &Policy,
    init_state_dist: &Belief,
    init_history: Option<&ObsHistory>,
    steps: usize,
    rng: &RngStream,
) -> Result<Trajectory> {
    model.ensure_valid()?;
    if steps == 0 {
        return Err(Error::InvalidParameter("need at least one step".into()));
    }
    if init_state_dist.len() != model.num_states {
        return Err(Error::Dimension(format!(
            "initial distribution has {} entries for {} states",
            init_state_dist.len(),
            model.num_states
        )));
    }
    match policy {
        Policy::Fixed(actions) => {
            if actions.len() < steps {
                return Err(Error::InvalidParameter(format!(
                    "fixed policy has {} actions for {steps} steps",
                    actions.len()
                )));
            }
            if let Some(&a) = actions.iter().find(|&&a| a >= model.num_actions) {
                return Err(Error::InvalidParameter(format!("action {a} out of range")));
            }
        }
        Policy::Alpha(sets) => {
            if sets.len() < 2 || sets.iter().skip(1).any(AlphaVectorSet::is_empty) {
                return Err(Error::EmptyAlphaSet);
            }
        }
        Policy::UniformRandom => {}
    }
    let mut history = match init_history {
        Some(h) => {
            if h.order() != model.var_order || h.dim() != model.obs_dim || !h.is_filled() {
                return Err(Error::WarmUp {
                    have: h.fill_count(),
                    need: model.var_order,
                });
            }
            h.clone()
        }
        None => ObsHistory::zeros(model.var_order, model.obs_dim),
    };
    let noise: Vec<Gaussian> = model
        .emissions
        .iter()
        .enumerate()
        .map(|(s, e)| {
            Gaussian::new(&e.noise_cov)
                .map_err(|_| Error::NotPositiveDefinite(format!("noise covariance of state {s}")))
        })
        .collect::<Result<_>>()?;

    let mut r = rng.rng();
    let mut traj = Trajectory {
        observations: Vec::with_capacity(steps),
        actions: Some(Vec::with_capacity(steps)),
        true_states: Some(Vec::with_capacity(steps)),
    };
    let mut state = stats::sample_categorical(init_state_dist.probs(), &mut r);
    let mut belief = init_state_dist.clone();
    let mut last_action: Option<usize> = None;
    for t in 0..steps {
        let obs = model.emissions[state].mean(&history) + noise[state].sample_centered(&mut r);
        if let Policy::Alpha(_) = policy {
            belief = match last_action {
                None => crate::model::belief_correct(model, &belief, &obs, &history),
                Some(a) => belief_update(model, &belief, a, &obs, &history),
            }
            .or_else(|_| match last_action {
                None => Ok(belief.clone()),
                Some(a) => Belief::normalized(model.predict(belief.probs(), a)),
            })?;
        }
        let action = match policy {
            Policy::Fixed(actions) => actions[t],
            Policy::UniformRandom => r.random_range(0..model.num_actions),
            Policy::Alpha(sets) => {
                let to_go = (sets.len() - 1).saturating_sub(t).max(1);
                planner::extract_action(&sets[to_go], &belief)?
            }
        };
        traj.observations.push(obs.clone());
        traj.actions.as_mut().expect("set").push(action);
        traj.true_states.as_mut().expect("set").push(state);
        history.push(obs)?;
        last_action = Some(action);
        state = stats::sample_categorical(&model.transitions[action][state], &mut r);
    }
    Ok(traj)
}

/// Parameters of a random stable corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_modes: usize,
    pub obs_dim: usize,
    pub var_order: usize,
    pub length: usize,
    pub num_series: usize,
    #[serde(default = "one")]
    pub num_actions: usize,
    /// Expected dwell time in a mode, in steps.
    #[serde(default = "default_dwell")]
    pub mean_dwell: f64,
    /// Minimum pairwise Frobenius distance between the stacked lag matrices of two modes.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Noise standard deviation of every mode.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn one() -> usize {
    1
}

fn default_dwell() -> f64 {
    50.0
}

fn default_separation() -> f64 {
    1.5
}

fn default_noise() -> f64 {
    0.3
}

impl CorpusSpec {
    pub fn new(num_modes: usize, obs_dim: usize, var_order: usize, length: usize, num_series: usize) -> Self {
        Self {
            num_modes,
            obs_dim,
            var_order,
            length,
            num_series,
            num_actions: 1,
            mean_dwell: default_dwell(),
            separation: default_separation(),
            noise_std: default_noise(),
        }
    }
}

pub const MAX_SPECTRAL_RADIUS: f64 = 0.95;

/// Block companion matrix of `o_t = Σ_j A_j o_{t-j}`.
pub fn companion_matrix(lags: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r = lags.len();
    let d = lags.first().map_or(0, |a| a.nrows());
    let mut c = DMatrix::zeros(r * d, r * d);
    for (j, a) in lags.iter().enumerate() {
        c.view_mut((0, j * d), (d, d)).copy_from(a);
    }
    for j in 1..r {
        c.view_mut((j * d, (j - 1) * d), (d, d))
            .copy_from(&DMatrix::identity(d, d));
    }
    c
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Scales `A_j` by `c^j`, which scales every companion eigenvalue by `c`.
fn rescale_to_radius(lags: &mut [DMatrix<f64>], target: f64) {
    let rho = spectral_radius(&companion_matrix(lags));
    if rho > target {
        let c = target / rho * (1.0 - 1e-9);
        for (j, a) in lags.iter_mut().enumerate() {
            *a *= c.powi(j as i32 + 1);
        }
    }
}

fn random_lags<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    let mut lags: Vec<DMatrix<f64>> = (0..r)
        .map(|_| DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let target = rng.random_range(0.6..MAX_SPECTRAL_RADIUS);
    let rho = spectral_radius(&companion_matrix(&lags));
    // Push up to the target as well, so modes are persistent rather than white.
    if rho > 0.0 {
        let c = target / rho;
        for (j, a) in lags.iter_mut().enumerate() {
            *a *= c.powi(j as i32 + 1);
        }
    }
    rescale_to_radius(&mut lags, MAX_SPECTRAL_RADIUS);
    lags
}

fn stacked_distance(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Draws a random stable VAR-POMDP with sticky transitions and samples
/// `num_series` trajectories from it under a uniformly random policy.
pub fn make_synthetic_corpus(
    spec: &CorpusSpec,
    rng: &RngStream,
) -> Result<(VarPomdpModel, Vec<Trajectory>)> {
    if spec.num_modes == 0 || spec.obs_dim == 0 || spec.num_actions == 0 {
        return Err(Error::InvalidParameter(
            "corpus needs at least one mode, dimension and action".into(),
        ));
    }
    if spec.length == 0 || spec.num_series == 0 {
        return Err(Error::InvalidParameter("corpus needs non-empty series".into()));
    }
    if !(spec.mean_dwell >= 1.0) || !(spec.noise_std > 0.0) {
        return Err(Error::InvalidParameter("mean_dwell >= 1 and noise_std > 0 required".into()));
    }
    let n = spec.num_modes;
    let d = spec.obs_dim;
    let mut r = rng.substream(&[0]).rng();

    let mut modes: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while modes.len() < n {
        let cand = random_lags(d, spec.var_order, &mut r);
        attempts += 1;
        let far = modes
            .iter()
            .all(|m| stacked_distance(m, &cand) >= spec.separation);
        // Give up on separation rather than loop forever for r = 0 or tiny d.
        if far || attempts > 1000 {
            modes.push(cand);
        }
    }
    let emissions: Vec<Emission> = modes
        .into_iter()
        .map(|lags| Emission::new(lags, DMatrix::identity(d, d) * spec.noise_std.powi(2)))
        .collect();

    let stay = 1.0 - 1.0 / spec.mean_dwell;
    let transitions = (0..spec.num_actions)
        .map(|_| {
            (0..n)
                .map(|s| {
                    if n == 1 {
                        return Ok(vec![1.0]);
                    }
                    let w: Vec<f64> = vec![1.0; n - 1];
                    let leave = stats::dirichlet_sample(&w, &mut r)?;
                    let mut row = Vec::with_capacity(n);
                    let mut it = leave.into_iter();
                    for s2 in 0..n {
                        row.push(if s2 == s {
                            stay
                        } else {
                            (1.0 - stay) * it.next().expect("n-1 entries")
                        });
                    }
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let model = VarPomdpModel {
        num_states: n,
        num_actions: spec.num_actions,
        obs_dim: d,
        var_order: spec.var_order,
        transitions,
        emissions,
        labels: vec![BTreeSet::new(); n],
        state_names: None,
        action_names: None,
    };
    model.ensure_valid()?;
    let init = Belief::uniform(n);
    let series = (0..spec.num_series)
        .into_par_iter()
        .map(|i| {
            simulate(
                &model,
                &Policy::UniformRandom,
                &init,
                None,
                spec.length,
                &rng.substream(&[1, i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, series))
}

/// Empirical `counts[a][s][s']` from the true states and actions of trajectories.
pub fn transition_counts(
    num_actions: usize,
    num_states: usize,
    trajectories: &[Trajectory],
) -> Result<Vec<Vec<Vec<u64>>>> {
    let mut counts = vec![vec![vec![0u64; num_states]; num_states]; num_actions];
    for traj in trajectories {
        let (Some(actions), Some(states)) = (&traj.actions, &traj.true_states) else {
            return Err(Error::MissingData("trajectory lacks actions or states".into()));
        };
        for t in 1..states.len() {
            counts[actions[t - 1]][states[t - 1]][states[t]] += 1;
        }
    }
    Ok(counts)
}

/// `o_t − Σ_j A_j o_{t-j}` with a zero-padded history.
pub fn residuals(emission: &Emission, observations: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let d = emission.noise_cov.nrows();
    let mut h = ObsHistory::zeros(emission.lag_matrices.len(), d);
    observations
        .iter()
        .map(|o| {
            let e = o - emission.mean(&h);
            h.push(o.clone()).expect("matching dimension");
            e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::scalar_model;
    use crate::planner::AlphaVector;

    fn two_state() -> VarPomdpModel {
        let mut m = scalar_model(&[1.0, 0.5], &[0.3, -0.4], 1);
        m.transitions[0] = vec![vec![0.8, 0.2], vec![0.35, 0.65]];
        m
    }

    #[test]
    fn absorbing_state_is_never_left() {
        let mut m = scalar_model(&[1.0, 1.0, 1.0], &[0.0; 3], 0);
        m.num_actions = 2;
        m.transitions = vec![
            vec![vec![0.6, 0.3, 0.1], vec![0.5, 0.4, 0.1], vec![0.0, 0.0, 1.0]],
            vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.7, 0.1], vec![0.0, 0.0, 1.0]],
        ];
        let traj = simulate(
            &m,
            &Policy::UniformRandom,
            &Belief::unit(3, 0),
            None,
            2000,
            &RngStream::new(5),
        )
        .unwrap();
        let states = traj.true_states.unwrap();
        let first = states.iter().position(|&s| s == 2).expect("reaches goal");
        assert!(states[first..].iter().all(|&s| s == 2));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let m = two_state();
        let go = |seed| {
            simulate(&m, &Policy::UniformRandom, &Belief::uniform(2), None, 200, &RngStream::new(seed))
                .unwrap()
        };
        assert_eq!(go(9), go(9));
        assert_ne!(go(9), go(10));
    }

    #[test]
    fn empirical_transition_frequencies() {
        let m = two_state();
        let steps = 100_000;
        let traj = simulate(
            &m,
            &Policy::Fixed(vec![0; steps]),
            &Belief::unit(2, 0),
            None,
            steps,
            &RngStream::new(11),
        )
        .unwrap();
        let counts = transition_counts(1, 2, &[traj]).unwrap();
        for s in 0..2 {
            let n: u64 = counts[0][s].iter().sum();
            for s2 in 0..2 {
                let f = counts[0][s][s2] as f64 / n as f64;
                assert!((f - m.transitions[0][s][s2]).abs() < 0.01, "{s}->{s2}: {f}");
            }
        }
    }

    #[test]
    fn first_observation_uses_zero_history() {
        let mut m = scalar_model(&[1e-6], &[100.0], 1);
        m.transitions[0] = vec![vec![1.0]];
        let traj =
            simulate(&m, &Policy::UniformRandom, &Belief::unit(1, 0), None, 3, &RngStream::new(1))
                .unwrap();
        assert!(traj.observations[0][0].abs() < 0.01);
        let mut h = ObsHistory::new(1, 1);
        assert!(matches!(
            simulate(&m, &Policy::UniformRandom, &Belief::unit(1, 0), Some(&h), 3, &RngStream::new(1)),
            Err(Error::WarmUp { .. })
        ));
        h.push(DVector::from_vec(vec![1.0])).unwrap();
        let traj =
            simulate(&m, &Policy::UniformRandom, &Belief::unit(1, 0), Some(&h), 1, &RngStream::new(1))
                .unwrap();
        assert!((traj.observations[0][0] - 100.0).abs() < 0.01);
    }

    #[test]
    fn policy_errors() {
        let m = two_state();
        let b = Belief::uniform(2);
        let r = RngStream::new(0);
        assert!(matches!(
            simulate(&m, &Policy::Alpha(vec![]), &b, None, 5, &r),
            Err(Error::EmptyAlphaSet)
        ));
        assert!(simulate(&m, &Policy::Fixed(vec![0; 3]), &b, None, 5, &r).is_err());
        assert!(simulate(&m, &Policy::Fixed(vec![1; 5]), &b, None, 5, &r).is_err());
        assert!(simulate(&m, &Policy::UniformRandom, &b, None, 0, &r).is_err());
    }

    #[test]
    fn alpha_policy_follows_vectors() {
        let mut m = two_state();
        m.num_actions = 2;
        m.transitions.push(vec![vec![0.1, 0.9], vec![0.1, 0.9]]);
        let set = |t| AlphaVectorSet {
            step: t,
            vectors: vec![AlphaVector {
                alpha: vec![0.5, 0.5],
                action: 1,
                source_belief: 0,
            }],
        };
        let policy = Policy::Alpha(vec![set(0), set(1), set(2)]);
        let traj = simulate(&m, &policy, &Belief::uniform(2), None, 10, &RngStream::new(2)).unwrap();
        assert!(traj.actions.unwrap().iter().all(|&a| a == 1));
    }

    #[test]
    fn single_mode_corpus() {
        let spec = CorpusSpec::new(1, 2, 1, 300, 2);
        let (m, series) = make_synthetic_corpus(&spec, &RngStream::new(3)).unwrap();
        assert_eq!(m.num_states, 1);
        assert_eq!(series.len(), 2);
        for s in series {
            assert!(s.true_states.unwrap().iter().all(|&z| z == 0));
        }
    }

    #[test]
    fn corpus_is_stable_and_reproducible() {
        for (d, r) in [(2, 1), (2, 2), (3, 3), (1, 2)] {
            let spec = CorpusSpec::new(4, d, r, 100, 2);
            let (m, a) = make_synthetic_corpus(&spec, &RngStream::new(17)).unwrap();
            for e in &m.emissions {
                assert!(spectral_radius(&companion_matrix(&e.lag_matrices)) <= MAX_SPECTRAL_RADIUS);
            }
            let (m2, b) = make_synthetic_corpus(&spec, &RngStream::new(17)).unwrap();
            assert_eq!(m, m2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn companion_of_scalar_ar2() {
        let lags = vec![DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.06)];
        // z² − 0.5 z − 0.06 = (z − 0.6)(z + 0.1)
        assert!((spectral_radius(&companion_matrix(&lags)) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn residuals_recover_noise() {
        let e = Emission::new(vec![DMatrix::from_element(1, 1, 0.5)], DMatrix::identity(1, 1));
        let obs: Vec<DVector<f64>> = [1.0, 2.0, 0.0].iter().map(|&x| DVector::from_vec(vec![x])).collect();
        let res = residuals(&e, &obs);
        assert_eq!(res[0][0], 1.0);
        assert_eq!(res[1][0], 1.5);
        assert_eq!(res[2][0], -1.0);
    }
}
