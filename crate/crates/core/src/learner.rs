//! Mode discovery with a beta-process autoregressive HMM and assembly of a
//! VAR-POMDP from the discovered modes.
//!
//! The beta process is truncated to `K_max` shared features (weak limit).
//! Feature `k` carries VAR parameters `θ_k = (A_k, Σ_k)` and a global
//! inclusion weight `ω_k ~ Beta(c / K_max, 1)`. Series `i` switches among
//! the features it owns (`F[i][k] = 1`) with a sticky HMM,
//!
//! ```text
//! π^i_j ~ Dir(γ·1 + κ·e_j)            over the features owned by series i
//! z^i_t ~ π^i_{z^i_{t-1}},            z^i_0 uniform over owned features
//! y^i_t ~ N(A_{z^i_t} x^i_t, Σ_{z^i_t})
//! ```
//!
//! where `x^i_t` stacks the previous `r` observations, zero-padded at the
//! start of each series. One sweep resamples mode sequences, features,
//! VAR parameters and transition weights, in that order.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{Emission, ObsHistory, Trajectory, VarPomdpModel};
use crate::stats::{self, Gaussian, MniwPrior, RegressionStats, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hypers {
    /// Beta-process mass `c`.
    pub bp_mass: f64,
    /// Dirichlet concentration `γ`.
    pub dir_conc: f64,
    /// Self-transition bias `κ`.
    pub sticky: f64,
}

impl Default for Hypers {
    fn default() -> Self {
        Self {
            bp_mass: 1.0,
            dir_conc: 1.0,
            sticky: 10.0,
        }
    }
}

impl Hypers {
    fn validate(&self) -> Result<()> {
        if !(self.bp_mass > 0.0) || !(self.dir_conc > 0.0) || !(self.sticky >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "hyperparameters need c > 0, γ > 0, κ ≥ 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Isotropic MNIW prior on every `θ_k`: `K0 = col_precision·I`,
/// `S0 = scale·I`, `nu0 = dof` (default `d + 2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub col_precision: f64,
    pub scale: f64,
    pub dof: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            col_precision: 0.1,
            scale: 0.5,
            dof: None,
        }
    }
}

impl PriorConfig {
    pub fn build(&self, obs_dim: usize, var_order: usize) -> Result<MniwPrior> {
        let p = MniwPrior::isotropic(
            obs_dim,
            var_order,
            self.col_precision,
            self.scale,
            self.dof.unwrap_or(obs_dim as f64 + 2.0),
        );
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    #[serde(alias = "r")]
    pub var_order: usize,
    #[serde(alias = "K_max")]
    pub max_features: usize,
    pub sweeps: usize,
    pub burn_in: usize,
    pub hypers: Hypers,
    pub prior: PriorConfig,
    pub seed: u64,
    /// Features switched on for every series at initialization of the
    /// first chain. Further chains start from fewer, down to one for the last.
    pub init_features: usize,
    /// Length of the constant-label blocks of the initial segmentation.
    pub init_chunk: usize,
    /// Keep every `thin`-th post-burn-in sweep.
    pub thin: usize,
    /// Independent chains, run in parallel; see [`LearnerConfig::chain_init_features`].
    pub chains: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            var_order: 1,
            max_features: 20,
            sweeps: 500,
            burn_in: 250,
            hypers: Hypers::default(),
            prior: PriorConfig::default(),
            seed: 0,
            init_features: 5,
            init_chunk: 50,
            thin: 1,
            chains: 3,
        }
    }
}

impl LearnerConfig {
    /// Initial feature count of chain `c`, spread evenly from
    /// `init_features` (first chain) to 1 (last chain).
    pub fn chain_init_features(&self, c: usize) -> usize {
        let top = self.init_features.min(self.max_features);
        if self.chains <= 1 {
            return top;
        }
        let span = self.chains - 1;
        top - (c * (top - 1) + span / 2) / span
    }

    pub fn validate(&self) -> Result<()> {
        self.hypers.validate()?;
        if self.max_features == 0 {
            return Err(Error::InvalidParameter("max_features must be at least 1".into()));
        }
        if self.sweeps <= self.burn_in {
            return Err(Error::InvalidParameter(format!(
                "sweeps ({}) must exceed burn_in ({})",
                self.sweeps, self.burn_in
            )));
        }
        if self.init_features == 0 || self.init_chunk == 0 || self.thin == 0 || self.chains == 0 {
            return Err(Error::InvalidParameter(
                "init_features, init_chunk, thin and chains must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Observations of one series with their stacked, zero-padded regressors.
#[derive(Debug, Clone)]
struct Series {
    responses: Vec<DVector<f64>>,
    regressors: Vec<DVector<f64>>,
}

/// Training series prepared for a fixed VAR order.
#[derive(Debug, Clone)]
pub struct Corpus {
    obs_dim: usize,
    var_order: usize,
    series: Vec<Series>,
}

impl Corpus {
    pub fn new(trajectories: &[Trajectory], var_order: usize) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::MissingData("corpus is empty".into()));
        }
        let d = trajectories[0].obs_dim().unwrap_or(0);
        let mut series = Vec::with_capacity(trajectories.len());
        for (i, traj) in trajectories.iter().enumerate() {
            traj.check()?;
            if traj.len() < var_order + 2 {
                return Err(Error::MissingData(format!(
                    "series {i} has {} steps, need at least {}",
                    traj.len(),
                    var_order + 2
                )));
            }
            if traj.obs_dim() != Some(d) || d == 0 {
                return Err(Error::Dimension(format!("series {i} differs in dimension")));
            }
            let mut h = ObsHistory::zeros(var_order, d);
            let mut regressors = Vec::with_capacity(traj.len());
            for o in &traj.observations {
                regressors.push(h.regressor());
                h.push(o.clone())?;
            }
            series.push(Series {
                responses: traj.observations.clone(),
                regressors,
            });
        }
        Ok(Self {
            obs_dim: d,
            var_order,
            series,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn var_order(&self) -> usize {
        self.var_order
    }

    pub fn num_series(&self) -> usize {
        self.series.len()
    }

    pub fn series_len(&self, i: usize) -> usize {
        self.series[i].responses.len()
    }
}

/// One state of the sampler over `K` shared features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    /// `F[i][k]`.
    pub features: Vec<Vec<bool>>,
    /// `ω_k`.
    pub feature_weights: Vec<f64>,
    /// `z^i_t`, as feature indices.
    pub mode_seqs: Vec<Vec<usize>>,
    /// `π^i[j][k]`; zero outside the features owned by series `i`.
    pub trans_weights: Vec<Vec<Vec<f64>>>,
    pub thetas: Vec<Emission>,
    pub hypers: Hypers,
    /// Joint log-probability of the (unpruned) chain state.
    pub log_prob: f64,
    pub sweep: usize,
}

impl LearnerState {
    pub fn num_features(&self) -> usize {
        self.feature_weights.len()
    }

    pub fn owned(&self, series: usize) -> Vec<usize> {
        self.features[series]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(k, _)| k)
            .collect()
    }

    /// Features that label at least one step of some series.
    pub fn used_features(&self) -> BTreeSet<usize> {
        self.mode_seqs.iter().flatten().copied().collect()
    }

    pub fn num_active(&self) -> usize {
        self.used_features().len()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let k = self.num_features();
        let bad = |m: String| Err(Error::InvalidModel(m));
        for (i, z) in self.mode_seqs.iter().enumerate() {
            if let Some(&m) = z.iter().find(|&&m| m >= k || !self.features[i][m]) {
                return bad(format!("series {i} uses feature {m} it does not own"));
            }
            for j in self.owned(i) {
                let row = &self.trans_weights[i][j];
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return bad(format!("π^{i}_{j} sums to {s}"));
                }
                if row.iter().enumerate().any(|(c, &p)| p != 0.0 && !self.features[i][c]) {
                    return bad(format!("π^{i}_{j} puts mass on a feature series {i} lacks"));
                }
            }
        }
        for (kk, th) in self.thetas.iter().enumerate() {
            if stats::cholesky(&th.noise_cov, "noise covariance").is_err() {
                return bad(format!("θ_{kk} has a noise covariance that is not SPD"));
            }
        }
        Ok(())
    }

    /// Drops features that label no step anywhere and renumbers the rest in order.
    pub fn prune(&self) -> LearnerState {
        let used: Vec<usize> = self.used_features().into_iter().collect();
        let mut remap = vec![usize::MAX; self.num_features()];
        for (new, &old) in used.iter().enumerate() {
            remap[old] = new;
        }
        let trans_weights = self
            .trans_weights
            .iter()
            .enumerate()
            .map(|(i, pi)| {
                used.iter()
                    .map(|&j| {
                        let mut row: Vec<f64> = used.iter().map(|&c| pi[j][c]).collect();
                        let s: f64 = row.iter().sum();
                        if self.features[i][j] && s > 0.0 {
                            row.iter_mut().for_each(|p| *p /= s);
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        LearnerState {
            features: self
                .features
                .iter()
                .map(|f| used.iter().map(|&k| f[k]).collect())
                .collect(),
            feature_weights: used.iter().map(|&k| self.feature_weights[k]).collect(),
            mode_seqs: self
                .mode_seqs
                .iter()
                .map(|z| z.iter().map(|&m| remap[m]).collect())
                .collect(),
            trans_weights,
            thetas: used.iter().map(|&k| self.thetas[k].clone()).collect(),
            hypers: self.hypers,
            log_prob: self.log_prob,
            sweep: self.sweep,
        }
    }
}

fn emission_kernels(thetas: &[Emission]) -> Result<Vec<(DMatrix<f64>, Gaussian)>> {
    thetas
        .iter()
        .enumerate()
        .map(|(k, th)| {
            let g = Gaussian::new(&th.noise_cov)
                .map_err(|_| Error::NotPositiveDefinite(format!("noise covariance of θ_{k}")))?;
            Ok((th.stacked_lags(), g))
        })
        .collect()
}

fn step_loglik(kernel: &(DMatrix<f64>, Gaussian), x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let (a, g) = kernel;
    let resid = if a.ncols() == 0 { y.clone() } else { y - a * x };
    g.logpdf_centered(&resid)
}

/// Backward filtering, forward sampling over `m` local states.
fn ffbs<R: Rng + ?Sized>(loglik: &[Vec<f64>], pi: &[Vec<f64>], rng: &mut R) -> Vec<usize> {
    let len = loglik.len();
    let m = pi.len();
    if m == 1 {
        return vec![0; len];
    }
    let scaled: Vec<Vec<f64>> = loglik
        .iter()
        .map(|row| {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(|l| (l - top).exp()).collect()
        })
        .collect();
    let mut beta = vec![vec![1.0 / m as f64; m]; len];
    for t in (0..len - 1).rev() {
        let next: Vec<f64> = (0..m).map(|k| scaled[t + 1][k] * beta[t + 1][k]).collect();
        let mut b: Vec<f64> = pi
            .iter()
            .map(|row| row.iter().zip(&next).map(|(p, n)| p * n).sum())
            .collect();
        let s: f64 = b.iter().sum();
        if s > 0.0 && s.is_finite() {
            b.iter_mut().for_each(|v| *v /= s);
        } else {
            b = vec![1.0 / m as f64; m];
        }
        beta[t] = b;
    }
    let mut z = Vec::with_capacity(len);
    let uniform = vec![1.0 / m as f64; m];
    for t in 0..len {
        let prior = if t == 0 { &uniform } else { &pi[z[t - 1]] };
        let w: Vec<f64> = (0..m).map(|k| prior[k] * scaled[t][k] * beta[t][k]).collect();
        let k = if w.iter().sum::<f64>() > 0.0 {
            stats::sample_categorical(&w, rng)
        } else {
            (0..m)
                .max_by(|&a, &b| loglik[t][a].total_cmp(&loglik[t][b]))
                .unwrap_or(0)
        };
        z.push(k);
    }
    z
}

/// Draws every `z^i` jointly given `θ` and `π^i`.
pub fn sample_mode_sequences(
    state: &mut LearnerState,
    corpus: &Corpus,
    rng: &RngStream,
) -> Result<()> {
    let kernels = emission_kernels(&state.thetas)?;
    let new_seqs: Vec<Vec<usize>> = (0..corpus.num_series())
        .into_par_iter()
        .map(|i| {
            let owned = state.owned(i);
            let series = &corpus.series[i];
            let loglik: Vec<Vec<f64>> = series
                .regressors
                .iter()
                .zip(&series.responses)
                .map(|(x, y)| owned.iter().map(|&k| step_loglik(&kernels[k], x, y)).collect())
                .collect();
            let pi: Vec<Vec<f64>> = owned
                .iter()
                .map(|&j| owned.iter().map(|&k| state.trans_weights[i][j][k]).collect())
                .collect();
            let mut r = rng.substream(&[i as u64]).rng();
            ffbs(&loglik, &pi, &mut r)
                .into_iter()
                .map(|local| owned[local])
                .collect()
        })
        .collect();
    state.mode_seqs = new_seqs;
    Ok(())
}

fn transition_counts(z: &[usize], k: usize) -> Vec<Vec<u32>> {
    let mut counts = vec![vec![0u32; k]; k];
    for w in z.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    counts
}

/// `ln p(z^i | F_i)` with `π^i` integrated out, up to terms that do not
/// change when an unused feature is added: the change from `m` to `m + 1`
/// owned features.
fn add_feature_log_ratio(row_totals: &[u32], owned: usize, hypers: &Hypers) -> f64 {
    let g = hypers.dir_conc;
    let a_off = g * owned as f64 + hypers.sticky;
    let a_on = a_off + g;
    let mut lr = (owned as f64 / (owned + 1) as f64).ln();
    for &n in row_totals.iter().filter(|&&n| n > 0) {
        let n = n as f64;
        lr += ln_gamma(a_on) - ln_gamma(a_on + n) - ln_gamma(a_off) + ln_gamma(a_off + n);
    }
    lr
}

fn clamp_weight(w: f64) -> f64 {
    w.clamp(1e-300, 1.0 - 1e-16)
}

fn sample_dirichlet_row<R: Rng + ?Sized>(
    j: usize,
    owned: &[usize],
    counts: &[u32],
    k: usize,
    hypers: &Hypers,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let w: Vec<f64> = owned
        .iter()
        .map(|&c| {
            hypers.dir_conc + counts[c] as f64 + if c == j { hypers.sticky } else { 0.0 }
        })
        .collect();
    let draw = stats::dirichlet_sample(&w, rng)?;
    let mut row = vec![0.0; k];
    for (&c, p) in owned.iter().zip(draw) {
        row[c] = p;
    }
    Ok(row)
}

fn resample_series_pi<R: Rng + ?Sized>(
    state: &mut LearnerState,
    i: usize,
    rng: &mut R,
) -> Result<()> {
    let k = state.num_features();
    let owned = state.owned(i);
    let counts = transition_counts(&state.mode_seqs[i], k);
    let mut pi = vec![vec![0.0; k]; k];
    for &j in &owned {
        pi[j] = sample_dirichlet_row(j, &owned, &counts[j], k, &state.hypers, rng)?;
    }
    state.trans_weights[i] = pi;
    Ok(())
}

/// Resamples `F` feature by feature with `π` integrated out, then `ω`.
///
/// A feature that labels a step of series `i` stays on for that series.
/// Transition weights of series whose feature set changed are redrawn so
/// the state stays consistent.
pub fn sample_features(state: &mut LearnerState, corpus: &Corpus, rng: &RngStream) -> Result<()> {
    let k = state.num_features();
    let n = corpus.num_series();
    let mut r = rng.rng();
    for i in 0..n {
        let z = &state.mode_seqs[i];
        let counts = transition_counts(z, k);
        let row_totals: Vec<u32> = counts.iter().map(|row| row.iter().sum()).collect();
        let used: BTreeSet<usize> = z.iter().copied().collect();
        let before = state.features[i].clone();
        for kk in 0..k {
            if used.contains(&kk) {
                state.features[i][kk] = true;
                continue;
            }
            let owned_others = state.features[i]
                .iter()
                .enumerate()
                .filter(|&(c, &f)| f && c != kk)
                .count();
            let w = clamp_weight(state.feature_weights[kk]);
            let logit = w.ln() - (1.0 - w).ln()
                + add_feature_log_ratio(&row_totals, owned_others, &state.hypers);
            let p_on = 1.0 / (1.0 + (-logit).exp());
            state.features[i][kk] = r.random::<f64>() < p_on;
        }
        if state.features[i] != before {
            resample_series_pi(state, i, &mut r)?;
        }
    }
    let a0 = state.hypers.bp_mass / k as f64;
    for kk in 0..k {
        let m = state.features.iter().filter(|f| f[kk]).count() as f64;
        let beta = Beta::new(a0 + m, 1.0 + n as f64 - m)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        state.feature_weights[kk] = clamp_weight(beta.sample(&mut r));
    }
    Ok(())
}

/// MNIW posterior of every feature given the current mode sequences.
pub fn feature_posteriors(
    state: &LearnerState,
    corpus: &Corpus,
    prior: &MniwPrior,
) -> Result<Vec<MniwPrior>> {
    let k = state.num_features();
    let d = corpus.obs_dim;
    let p = d * corpus.var_order;
    let mut acc: Vec<RegressionStats> = (0..k).map(|_| RegressionStats::new(d, p)).collect();
    for (series, z) in corpus.series.iter().zip(&state.mode_seqs) {
        for ((x, y), &m) in series.regressors.iter().zip(&series.responses).zip(z) {
            acc[m].push(x, y);
        }
    }
    acc.iter()
        .map(|s| stats::mniw_posterior_from_stats(prior, s))
        .collect()
}

/// Draws every `θ_k` from its MNIW posterior; unused features draw from the prior.
pub fn sample_thetas(
    state: &mut LearnerState,
    corpus: &Corpus,
    prior: &MniwPrior,
    rng: &RngStream,
) -> Result<()> {
    let post = feature_posteriors(state, corpus, prior)?;
    state.thetas = post
        .par_iter()
        .enumerate()
        .map(|(k, params)| {
            let mut r = rng.substream(&[k as u64]).rng();
            let (a, cov) = stats::mniw_sample(params, &mut r)?;
            Ok(Emission::from_stacked(&a, cov))
        })
        .collect::<Result<_>>()?;
    Ok(())
}

/// `π^i_j ~ Dir(γ + n^i_j + κ e_j)` over the features owned by series `i`.
pub fn sample_trans_weights(
    state: &mut LearnerState,
    _corpus: &Corpus,
    rng: &RngStream,
) -> Result<()> {
    for i in 0..state.mode_seqs.len() {
        let mut r = rng.substream(&[i as u64]).rng();
        resample_series_pi(state, i, &mut r)?;
    }
    Ok(())
}

fn ln_dirichlet(p: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    ln_gamma(total) - w.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + p.iter()
            .zip(w)
            .map(|(&x, &a)| (a - 1.0) * x.max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
}

/// `ln p(ω, F, π, z, θ_used, y)`.
pub fn joint_log_prob(state: &LearnerState, corpus: &Corpus, prior: &MniwPrior) -> Result<f64> {
    let k = state.num_features();
    let h = &state.hypers;
    let a0 = h.bp_mass / k as f64;
    let mut lp = 0.0;
    for (kk, &w) in state.feature_weights.iter().enumerate() {
        let w = clamp_weight(w);
        lp += a0.ln() + (a0 - 1.0) * w.ln();
        for f in &state.features {
            lp += if f[kk] { w.ln() } else { (1.0 - w).ln() };
        }
    }
    let kernels = emission_kernels(&state.thetas)?;
    for (i, z) in state.mode_seqs.iter().enumerate() {
        let owned = state.owned(i);
        let pi = &state.trans_weights[i];
        for &j in &owned {
            let p: Vec<f64> = owned.iter().map(|&c| pi[j][c]).collect();
            let w: Vec<f64> = owned
                .iter()
                .map(|&c| h.dir_conc + if c == j { h.sticky } else { 0.0 })
                .collect();
            lp += ln_dirichlet(&p, &w);
        }
        lp -= (owned.len() as f64).ln();
        for w in z.windows(2) {
            lp += pi[w[0]][w[1]].max(f64::MIN_POSITIVE).ln();
        }
        let series = &corpus.series[i];
        for ((x, y), &m) in series.regressors.iter().zip(&series.responses).zip(z) {
            lp += step_loglik(&kernels[m], x, y);
        }
    }
    for kk in state.used_features() {
        let th = &state.thetas[kk];
        lp += prior.log_density(&th.stacked_lags(), &th.noise_cov)?;
    }
    Ok(lp)
}

/// Output of [`fit_bp_arhmm`].
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Pruned post-burn-in samples of every chain, chain by chain.
    pub samples: Vec<LearnerState>,
    /// Pruned sample with the highest joint log-probability.
    pub best: LearnerState,
    /// Joint log-probability of each chain's initial state.
    pub initial_log_probs: Vec<f64>,
    /// Joint log-probability after every sweep, per chain.
    pub traces: Vec<Vec<f64>>,
}

fn initial_state(
    corpus: &Corpus,
    config: &LearnerConfig,
    k_init: usize,
    prior: &MniwPrior,
    rng: &RngStream,
) -> Result<LearnerState> {
    let k = config.max_features;
    let n = corpus.num_series();
    let mut r = rng.substream(&[0]).rng();
    let mode_seqs: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let len = corpus.series_len(i);
            let mut z = Vec::with_capacity(len);
            while z.len() < len {
                let m = r.random_range(0..k_init);
                let take = config.init_chunk.min(len - z.len());
                z.extend(std::iter::repeat_n(m, take));
            }
            z
        })
        .collect();
    let mut state = LearnerState {
        features: vec![(0..k).map(|kk| kk < k_init).collect(); n],
        feature_weights: vec![0.5; k],
        mode_seqs,
        trans_weights: vec![vec![vec![0.0; k]; k]; n],
        thetas: Vec::new(),
        hypers: config.hypers,
        log_prob: f64::NEG_INFINITY,
        sweep: 0,
    };
    let a0 = config.hypers.bp_mass / k as f64;
    for kk in 0..k {
        let m = state.features.iter().filter(|f| f[kk]).count() as f64;
        let beta = Beta::new(a0 + m, 1.0 + n as f64 - m)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        state.feature_weights[kk] = clamp_weight(beta.sample(&mut r));
    }
    sample_thetas(&mut state, corpus, prior, &rng.substream(&[1]))?;
    sample_trans_weights(&mut state, corpus, &rng.substream(&[2]))?;
    state.log_prob = joint_log_prob(&state, corpus, prior)?;
    Ok(state)
}

/// One full Gibbs sweep.
pub fn sweep(
    state: &mut LearnerState,
    corpus: &Corpus,
    prior: &MniwPrior,
    rng: &RngStream,
) -> Result<()> {
    sample_mode_sequences(state, corpus, &rng.substream(&[0]))?;
    sample_features(state, corpus, &rng.substream(&[1]))?;
    sample_thetas(state, corpus, prior, &rng.substream(&[2]))?;
    sample_trans_weights(state, corpus, &rng.substream(&[3]))?;
    state.log_prob = joint_log_prob(state, corpus, prior)?;
    state.sweep += 1;
    debug_assert!(state.check_invariants().is_ok(), "{:?}", state.check_invariants());
    Ok(())
}

struct ChainOutput {
    samples: Vec<LearnerState>,
    initial: f64,
    trace: Vec<f64>,
}

fn run_chain(
    corpus: &Corpus,
    config: &LearnerConfig,
    k_init: usize,
    prior: &MniwPrior,
    rng: &RngStream,
) -> Result<ChainOutput> {
    let mut state = initial_state(corpus, config, k_init, prior, &rng.substream(&[0]))?;
    let initial = state.log_prob;
    let mut trace = Vec::with_capacity(config.sweeps);
    let mut samples = Vec::new();
    for s in 0..config.sweeps {
        sweep(&mut state, corpus, prior, &rng.substream(&[1, s as u64]))?;
        trace.push(state.log_prob);
        if s >= config.burn_in && (s - config.burn_in) % config.thin == 0 {
            samples.push(state.prune());
        }
    }
    Ok(ChainOutput {
        samples,
        initial,
        trace,
    })
}

/// Runs the sampler and returns pruned post-burn-in samples and the best one.
pub fn fit_bp_arhmm(trajectories: &[Trajectory], config: &LearnerConfig) -> Result<FitResult> {
    config.validate()?;
    let corpus = Corpus::new(trajectories, config.var_order)?;
    let prior = config.prior.build(corpus.obs_dim, config.var_order)?;
    let root = RngStream::new(config.seed);
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let k_init = config.chain_init_features(c);
            run_chain(&corpus, config, k_init, &prior, &root.substream(&[c as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = FitResult {
        samples: Vec::new(),
        best: chains[0].samples[0].clone(),
        initial_log_probs: Vec::new(),
        traces: Vec::new(),
    };
    for chain in chains {
        result.initial_log_probs.push(chain.initial);
        result.traces.push(chain.trace);
        result.samples.extend(chain.samples);
    }
    for s in &result.samples {
        if s.log_prob > result.best.log_prob {
            result.best = s.clone();
        }
    }
    Ok(result)
}

/// Most likely mode path of a new trajectory under a learned sample, using
/// transition weights pooled across the training series.
pub fn decode_modes(state: &LearnerState, trajectory: &Trajectory) -> Result<Vec<usize>> {
    let k = state.num_features();
    let order = state.thetas.first().map_or(0, |t| t.lag_matrices.len());
    let corpus = Corpus::new(std::slice::from_ref(trajectory), order)?;
    let kernels = emission_kernels(&state.thetas)?;
    let mut pooled = vec![vec![0.0; k]; k];
    for pi in &state.trans_weights {
        for (acc, row) in pooled.iter_mut().zip(pi) {
            for (a, p) in acc.iter_mut().zip(row) {
                *a += p;
            }
        }
    }
    let log_pi: Vec<Vec<f64>> = pooled
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|p| (p / s).ln()).collect()
            } else {
                (0..k).map(|c| if c == j { 0.0 } else { f64::NEG_INFINITY }).collect()
            }
        })
        .collect();
    let series = &corpus.series[0];
    let len = series.responses.len();
    let mut score: Vec<f64> = (0..k)
        .map(|m| step_loglik(&kernels[m], &series.regressors[0], &series.responses[0]))
        .collect();
    let mut back = vec![vec![0usize; k]; len];
    for t in 1..len {
        let mut next = vec![f64::NEG_INFINITY; k];
        for c in 0..k {
            let (arg, best) = (0..k)
                .map(|j| (j, score[j] + log_pi[j][c]))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            back[t][c] = arg;
            next[c] = best + step_loglik(&kernels[c], &series.regressors[t], &series.responses[t]);
        }
        score = next;
    }
    let mut z = vec![0; len];
    z[len - 1] = (0..k).fold(0, |a, c| if score[c] > score[a] { c } else { a });
    for t in (1..len).rev() {
        z[t - 1] = back[t][z[t]];
    }
    Ok(z)
}

/// `sqrt(ln(2/δ) / (2n))`.
pub fn chernoff_half_width(n: u64, delta: f64) -> Result<f64> {
    check_unit("delta", delta)?;
    if n == 0 {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    Ok(((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Smallest `n` with `chernoff_half_width(n, δ) ≤ ε`.
pub fn required_sample_size(epsilon: f64, delta: f64) -> Result<u64> {
    check_unit("epsilon", epsilon)?;
    check_unit("delta", delta)?;
    let n = ((2.0 / delta).ln() / (2.0 * epsilon * epsilon)).ceil() as u64;
    Ok(n.max(1))
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// Maximum-likelihood transition estimate with Chernoff half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    /// `counts[a][s][s']`.
    pub counts: Vec<Vec<Vec<u64>>>,
    pub probs: Vec<Vec<Vec<f64>>>,
    /// `epsilon[a][s]`; `None` for rows without data.
    pub epsilon: Vec<Vec<Option<f64>>>,
    pub delta: f64,
    /// `(action, state)` rows without data, set to a self-loop.
    pub defaulted_rows: Vec<(usize, usize)>,
}

impl TransitionEstimate {
    pub fn from_counts(counts: Vec<Vec<Vec<u64>>>, delta: f64) -> Result<Self> {
        check_unit("delta", delta)?;
        let mut defaulted_rows = Vec::new();
        let mut probs = Vec::with_capacity(counts.len());
        let mut epsilon = Vec::with_capacity(counts.len());
        for (a, rows) in counts.iter().enumerate() {
            let mut p_rows = Vec::with_capacity(rows.len());
            let mut e_rows = Vec::with_capacity(rows.len());
            for (s, row) in rows.iter().enumerate() {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    let mut p = vec![0.0; row.len()];
                    p[s] = 1.0;
                    p_rows.push(p);
                    e_rows.push(None);
                    defaulted_rows.push((a, s));
                } else {
                    p_rows.push(row.iter().map(|&c| c as f64 / n as f64).collect());
                    e_rows.push(Some(chernoff_half_width(n, delta)?));
                }
            }
            probs.push(p_rows);
            epsilon.push(e_rows);
        }
        Ok(Self {
            counts,
            probs,
            epsilon,
            delta,
            defaulted_rows,
        })
    }
}

/// Builds a VAR-POMDP whose states are the features of a pruned sample.
///
/// Mode labels come from the sample when `corpus` is its training corpus
/// (same number and lengths of series); otherwise each series is decoded
/// with [`decode_modes`]. The number of actions is one more than the
/// largest action index seen.
pub fn build_model(
    best: &LearnerState,
    corpus: &[Trajectory],
    label_map: &BTreeMap<usize, BTreeSet<String>>,
    delta: f64,
) -> Result<(VarPomdpModel, TransitionEstimate)> {
    let k = best.num_features();
    if k == 0 || best.used_features().len() != k {
        return Err(Error::InvalidParameter("sample must be pruned and non-empty".into()));
    }
    if let Some(missing) = (0..k).find(|s| !label_map.contains_key(s)) {
        return Err(Error::MissingData(format!("no label entry for state {missing}")));
    }
    let same_corpus = corpus.len() == best.mode_seqs.len()
        && corpus.iter().zip(&best.mode_seqs).all(|(t, z)| t.len() == z.len());
    let modes: Vec<Vec<usize>> = if same_corpus {
        best.mode_seqs.clone()
    } else {
        corpus.iter().map(|t| decode_modes(best, t)).collect::<Result<_>>()?
    };
    let mut num_actions = 0;
    for (i, t) in corpus.iter().enumerate() {
        let actions = t
            .actions
            .as_ref()
            .ok_or_else(|| Error::MissingData(format!("series {i} has no actions")))?;
        num_actions = num_actions.max(actions.iter().max().map_or(0, |a| a + 1));
    }
    if num_actions == 0 {
        return Err(Error::MissingData("corpus has no actions".into()));
    }
    let mut counts = vec![vec![vec![0u64; k]; k]; num_actions];
    for (t, z) in corpus.iter().zip(&modes) {
        let actions = t.actions.as_ref().expect("checked");
        for step in 1..z.len() {
            counts[actions[step - 1]][z[step - 1]][z[step]] += 1;
        }
    }
    let estimate = TransitionEstimate::from_counts(counts, delta)?;
    let d = best.thetas[0].noise_cov.nrows();
    let model = VarPomdpModel {
        num_states: k,
        num_actions,
        obs_dim: d,
        var_order: best.thetas[0].lag_matrices.len(),
        transitions: estimate.probs.clone(),
        emissions: best.thetas.clone(),
        labels: (0..k).map(|s| label_map[&s].clone()).collect(),
        state_names: None,
        action_names: None,
    };
    model.ensure_valid()?;
    Ok((model, estimate))
}

/// Fraction of mismatched labels after the best one-to-one relabeling of `estimate`.
pub fn hamming_error(truth: &[usize], estimate: &[usize]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "{} true labels but {} estimates",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let n = 1 + truth
        .iter()
        .chain(estimate)
        .copied()
        .max()
        .expect("non-empty");
    let mut confusion = Matrix::new(n, n, 0i64);
    for (&t, &e) in truth.iter().zip(estimate) {
        confusion[(t, e)] += 1;
    }
    let (matched, _) = kuhn_munkres(&confusion);
    Ok(1.0 - matched as f64 / truth.len() as f64)
}

/// Convenience view of the per-step labels of all series, concatenated.
pub fn flatten_labels(seqs: &[Vec<usize>]) -> Vec<usize> {
    seqs.iter().flatten().copied().collect()
}
