//! The VAR-POMDP model: finite states and actions, continuous observations
//! whose mean is a linear function of the previous `r` observations.
//!
//! ```text
//! o_t = Σ_{j=1..r} A_{j,s_t} o_{t-j} + e(s_t),    e(s_t) ~ N(0, Σ_{s_t})
//! ```
//!
//! There is no intercept term. A constant offset can be modelled by
//! augmenting observations with a constant-1 coordinate.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{self, Gaussian};

/// Tolerance for probability rows and belief normalization.
pub const PROB_TOL: f64 = 1e-9;

/// Per-state VAR emission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    /// `A_{1,s} .. A_{r,s}`, each `d × d`; index 0 multiplies the newest observation.
    #[serde(with = "crate::io::matrix_list")]
    pub lag_matrices: Vec<DMatrix<f64>>,
    #[serde(with = "crate::io::matrix")]
    pub noise_cov: DMatrix<f64>,
}

impl Emission {
    pub fn new(lag_matrices: Vec<DMatrix<f64>>, noise_cov: DMatrix<f64>) -> Self {
        Self {
            lag_matrices,
            noise_cov,
        }
    }

    /// Lag matrices side by side, `[A_1 A_2 .. A_r]` (`d × r·d`).
    pub fn stacked_lags(&self) -> DMatrix<f64> {
        let d = self.noise_cov.nrows();
        let r = self.lag_matrices.len();
        let mut out = DMatrix::zeros(d, r * d);
        for (j, a) in self.lag_matrices.iter().enumerate() {
            out.view_mut((0, j * d), (d, d)).copy_from(a);
        }
        out
    }

    /// Splits a stacked `d × r·d` matrix back into lag matrices.
    pub fn from_stacked(stacked: &DMatrix<f64>, noise_cov: DMatrix<f64>) -> Self {
        let d = noise_cov.nrows();
        let r = if d == 0 { 0 } else { stacked.ncols() / d };
        let lag_matrices = (0..r)
            .map(|j| stacked.view((0, j * d), (d, d)).into_owned())
            .collect();
        Self {
            lag_matrices,
            noise_cov,
        }
    }

    /// `Σ_j A_j o_{t-j}`.
    pub fn mean(&self, history: &ObsHistory) -> DVector<f64> {
        let d = self.noise_cov.nrows();
        let mut mu = DVector::zeros(d);
        for (j, a) in self.lag_matrices.iter().enumerate() {
            mu += a * history.lag(j + 1);
        }
        mu
    }
}

/// The tuple `(S, A, O, T, E, L)`; states and actions are indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarPomdpModel {
    pub num_states: usize,
    pub num_actions: usize,
    pub obs_dim: usize,
    pub var_order: usize,
    /// `transitions[a][s][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub emissions: Vec<Emission>,
    pub labels: Vec<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_names: Option<Vec<String>>,
}

impl VarPomdpModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> ValidationReport {
        validate_model(self)
    }

    /// Errors out with the first issue of [`validate_model`].
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        match report.issues.first() {
            None => Ok(()),
            Some(issue) => Err(Error::InvalidModel(format!(
                "{issue} ({} issue(s) total)",
                report.issues.len()
            ))),
        }
    }

    pub fn transition(&self, action: usize, state: usize, next: usize) -> f64 {
        self.transitions[action][state][next]
    }

    /// `Σ_s T[a][s][·] b_s`.
    pub fn predict(&self, belief: &[f64], action: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        for (s, &bs) in belief.iter().enumerate() {
            if bs == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(&self.transitions[action][s]) {
                *o += bs * t;
            }
        }
        out
    }

    pub fn label_alphabet(&self) -> BTreeSet<String> {
        self.labels.iter().flatten().cloned().collect()
    }

    pub fn state_name(&self, s: usize) -> String {
        self.state_names
            .as_ref()
            .and_then(|n| n.get(s).cloned())
            .unwrap_or_else(|| format!("s{s}"))
    }

    pub fn action_name(&self, a: usize) -> String {
        self.action_names
            .as_ref()
            .and_then(|n| n.get(a).cloned())
            .unwrap_or_else(|| format!("a{a}"))
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states {
            return Err(Error::InvalidParameter(format!(
                "state {state} out of range (|S| = {})",
                self.num_states
            )));
        }
        Ok(())
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.num_actions {
            return Err(Error::InvalidParameter(format!(
                "action {action} out of range (|A| = {})",
                self.num_actions
            )));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &DVector<f64>) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dimension(format!(
                "observation has {} entries, model expects {}",
                obs.len(),
                self.obs_dim
            )));
        }
        Ok(())
    }

    fn check_history(&self, history: &ObsHistory) -> Result<()> {
        if history.order() != self.var_order || history.dim() != self.obs_dim {
            return Err(Error::Dimension(format!(
                "history has order {} and dimension {}, model has {} and {}",
                history.order(),
                history.dim(),
                self.var_order,
                self.obs_dim
            )));
        }
        if !history.is_filled() {
            return Err(Error::WarmUp {
                have: history.fill_count(),
                need: self.var_order,
            });
        }
        Ok(())
    }
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    Shape(String),
    RowSum { action: usize, state: usize, sum: f64 },
    EntryOutOfRange { action: usize, state: usize, next: usize, value: f64 },
    LagCount { state: usize, found: usize },
    LagShape { state: usize, lag: usize, rows: usize, cols: usize },
    CovShape { state: usize, rows: usize, cols: usize },
    NotSymmetric { state: usize },
    NotPositiveDefinite { state: usize },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(msg) => write!(f, "shape: {msg}"),
            Self::RowSum { action, state, sum } => {
                write!(f, "transition row (a={action}, s={state}) sums to {sum}")
            }
            Self::EntryOutOfRange {
                action,
                state,
                next,
                value,
            } => write!(
                f,
                "transition (a={action}, s={state}, s'={next}) = {value} is outside [0, 1]"
            ),
            Self::LagCount { state, found } => {
                write!(f, "state {state} has {found} lag matrices")
            }
            Self::LagShape {
                state,
                lag,
                rows,
                cols,
            } => write!(f, "state {state} lag matrix {lag} is {rows}x{cols}"),
            Self::CovShape { state, rows, cols } => {
                write!(f, "state {state} noise covariance is {rows}x{cols}")
            }
            Self::NotSymmetric { state } => {
                write!(f, "state {state} noise covariance is not symmetric")
            }
            Self::NotPositiveDefinite { state } => {
                write!(f, "state {state} noise covariance is not positive definite")
            }
        }
    }
}

/// Outcome of [`validate_model`]; empty `issues` means the model is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "valid": self.is_valid(),
            "issues": self.issues.iter().map(|i| i.to_string()).collect::<Vec<_>>(),
        })
    }
}

/// Checks every model invariant and reports all violations with indices.
pub fn validate_model(model: &VarPomdpModel) -> ValidationReport {
    let mut issues = Vec::new();
    let (ns, na, d, r) = (
        model.num_states,
        model.num_actions,
        model.obs_dim,
        model.var_order,
    );
    if ns == 0 || na == 0 || d == 0 {
        issues.push(ValidationIssue::Shape(format!(
            "|S| = {ns}, |A| = {na}, d = {d} must all be positive"
        )));
    }
    if model.transitions.len() != na {
        issues.push(ValidationIssue::Shape(format!(
            "transitions has {} action slices, expected {na}",
            model.transitions.len()
        )));
    }
    for (a, slice) in model.transitions.iter().enumerate() {
        if slice.len() != ns {
            issues.push(ValidationIssue::Shape(format!(
                "transitions[{a}] has {} rows, expected {ns}",
                slice.len()
            )));
        }
        for (s, row) in slice.iter().enumerate() {
            if row.len() != ns {
                issues.push(ValidationIssue::Shape(format!(
                    "transitions[{a}][{s}] has {} entries, expected {ns}",
                    row.len()
                )));
                continue;
            }
            for (next, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    issues.push(ValidationIssue::EntryOutOfRange {
                        action: a,
                        state: s,
                        next,
                        value,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if !((sum - 1.0).abs() <= PROB_TOL) {
                issues.push(ValidationIssue::RowSum {
                    action: a,
                    state: s,
                    sum,
                });
            }
        }
    }
    if model.emissions.len() != ns {
        issues.push(ValidationIssue::Shape(format!(
            "{} emissions for {ns} states",
            model.emissions.len()
        )));
    }
    for (s, e) in model.emissions.iter().enumerate() {
        if e.lag_matrices.len() != r {
            issues.push(ValidationIssue::LagCount {
                state: s,
                found: e.lag_matrices.len(),
            });
        }
        for (j, a) in e.lag_matrices.iter().enumerate() {
            if a.nrows() != d || a.ncols() != d {
                issues.push(ValidationIssue::LagShape {
                    state: s,
                    lag: j + 1,
                    rows: a.nrows(),
                    cols: a.ncols(),
                });
            }
        }
        let cov = &e.noise_cov;
        if cov.nrows() != d || cov.ncols() != d {
            issues.push(ValidationIssue::CovShape {
                state: s,
                rows: cov.nrows(),
                cols: cov.ncols(),
            });
            continue;
        }
        let asym = (cov - cov.transpose()).amax();
        if !(asym <= PROB_TOL * cov.amax().max(1.0)) {
            issues.push(ValidationIssue::NotSymmetric { state: s });
        }
        if stats::cholesky(cov, "noise covariance").is_err() {
            issues.push(ValidationIssue::NotPositiveDefinite { state: s });
        }
    }
    if model.labels.len() != ns {
        issues.push(ValidationIssue::Shape(format!(
            "{} label sets for {ns} states",
            model.labels.len()
        )));
    }
    if let Some(names) = &model.state_names {
        if names.len() != ns {
            issues.push(ValidationIssue::Shape(format!(
                "{} state names for {ns} states",
                names.len()
            )));
        }
    }
    if let Some(names) = &model.action_names {
        if names.len() != na {
            issues.push(ValidationIssue::Shape(format!(
                "{} action names for {na} actions",
                names.len()
            )));
        }
    }
    ValidationReport { issues }
}

/// A probability distribution over hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidBelief("empty belief".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidBelief(format!("entry {p} is negative or not finite")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidBelief(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidBelief(format!("weights sum to {sum}")));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn unit(num_states: usize, state: usize) -> Self {
        let mut p = vec![0.0; num_states];
        p[state] = 1.0;
        Self(p)
    }

    pub fn uniform(num_states: usize) -> Self {
        Self(vec![1.0 / num_states as f64; num_states])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn l1_distance(&self, other: &Belief) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

impl TryFrom<Vec<f64>> for Belief {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Belief> for Vec<f64> {
    fn from(b: Belief) -> Self {
        b.0
    }
}

/// The `r` most recent observations, newest last.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsHistory {
    order: usize,
    dim: usize,
    window: VecDeque<DVector<f64>>,
}

impl ObsHistory {
    pub fn new(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            window: VecDeque::with_capacity(order),
        }
    }

    /// A full window of zero vectors.
    pub fn zeros(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            window: (0..order).map(|_| DVector::zeros(dim)).collect(),
        }
    }

    pub fn for_model(model: &VarPomdpModel) -> Self {
        Self::new(model.var_order, model.obs_dim)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill_count(&self) -> usize {
        self.window.len()
    }

    pub fn is_filled(&self) -> bool {
        self.window.len() == self.order
    }

    pub fn window(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.window.iter()
    }

    pub fn push(&mut self, obs: DVector<f64>) -> Result<()> {
        if obs.len() != self.dim {
            return Err(Error::Dimension(format!(
                "observation has {} entries, history holds {}-vectors",
                obs.len(),
                self.dim
            )));
        }
        if self.order == 0 {
            return Ok(());
        }
        if self.window.len() == self.order {
            self.window.pop_front();
        }
        self.window.push_back(obs);
        Ok(())
    }

    /// `o_{t-j}` for `j ≥ 1`; `lag(1)` is the newest entry.
    pub fn lag(&self, j: usize) -> &DVector<f64> {
        &self.window[self.window.len() - j]
    }

    /// `[o_{t-1}; o_{t-2}; .. ; o_{t-r}]`, the regressor for stacked lag matrices.
    pub fn regressor(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.order * self.dim);
        for j in 1..=self.window.len() {
            x.rows_mut((j - 1) * self.dim, self.dim).copy_from(self.lag(j));
        }
        x
    }
}

/// Returns a copy of `history` with `obs` appended.
pub fn push_history(history: &ObsHistory, obs: &DVector<f64>) -> Result<ObsHistory> {
    let mut h = history.clone();
    h.push(obs.clone())?;
    Ok(h)
}

/// Observations with optional aligned actions and ground-truth states.
///
/// `actions[t]` is taken after `observations[t]` is seen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub observations: Vec<DVector<f64>>,
    pub actions: Option<Vec<usize>>,
    pub true_states: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.observations.first().map(|o| o.len())
    }

    pub fn check(&self) -> Result<()> {
        let n = self.observations.len();
        if let Some(d) = self.obs_dim() {
            if self.observations.iter().any(|o| o.len() != d) {
                return Err(Error::Dimension("observations differ in dimension".into()));
            }
        }
        for (name, len) in [
            ("actions", self.actions.as_ref().map(|a| a.len())),
            ("true_states", self.true_states.as_ref().map(|s| s.len())),
        ] {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::Dimension(format!(
                        "{name} has {len} entries for {n} observations"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `ln N(obs; Σ_j A_{j,s} o_{t-j}, Σ_s)`.
pub fn emission_logpdf(
    model: &VarPomdpModel,
    state: usize,
    obs: &DVector<f64>,
    history: &ObsHistory,
) -> Result<f64> {
    model.check_state(state)?;
    model.check_obs(obs)?;
    model.check_history(history)?;
    let e = &model.emissions[state];
    let g = Gaussian::new(&e.noise_cov)
        .map_err(|_| Error::NotPositiveDefinite(format!("noise covariance of state {state}")))?;
    Ok(g.logpdf(obs, &e.mean(history)))
}

fn emission_logpdfs(
    model: &VarPomdpModel,
    obs: &DVector<f64>,
    history: &ObsHistory,
) -> Result<Vec<f64>> {
    (0..model.num_states)
        .map(|s| emission_logpdf(model, s, obs, history))
        .collect()
}

/// Folds log-likelihoods into prior weights and normalizes in log space.
fn posterior_from_logs(prior: &[f64], loglik: &[f64]) -> Result<Belief> {
    let logs: Vec<f64> = prior
        .iter()
        .zip(loglik)
        .map(|(&p, &l)| if p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let log_norm = stats::log_sum_exp(&logs);
    if !(log_norm >= 1e-300f64.ln()) {
        return Err(Error::ImpossibleObservation(log_norm.exp()));
    }
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - log_norm).exp()).collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    Ok(Belief(probs))
}

/// Bayes filter step: `b'_{s'} ∝ E(o | s', history) Σ_s T[a][s][s'] b_s`.
pub fn belief_update(
    model: &VarPomdpModel,
    belief: &Belief,
    action: usize,
    obs: &DVector<f64>,
    history: &ObsHistory,
) -> Result<Belief> {
    model.check_action(action)?;
    if belief.len() != model.num_states {
        return Err(Error::Dimension(format!(
            "belief has {} entries for {} states",
            belief.len(),
            model.num_states
        )));
    }
    let prior = model.predict(belief.probs(), action);
    let loglik = emission_logpdfs(model, obs, history)?;
    posterior_from_logs(&prior, &loglik)
}

/// Conditions a belief on an observation without a transition step.
pub fn belief_correct(
    model: &VarPomdpModel,
    belief: &Belief,
    obs: &DVector<f64>,
    history: &ObsHistory,
) -> Result<Belief> {
    if belief.len() != model.num_states {
        return Err(Error::Dimension(format!(
            "belief has {} entries for {} states",
            belief.len(),
            model.num_states
        )));
    }
    let loglik = emission_logpdfs(model, obs, history)?;
    posterior_from_logs(belief.probs(), &loglik)
}
