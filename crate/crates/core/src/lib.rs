//! Vector-autoregressive POMDPs.
//!
//! A VAR-POMDP is a POMDP whose continuous observation at time `t` is a
//! linear function of the previous `r` observations plus state-dependent
//! Gaussian noise. This crate learns such models from multivariate time
//! series with a beta-process autoregressive HMM sampler, and checks PCTL
//! bounded-until properties against them with point-based value iteration.

pub mod error;
pub mod io;
pub mod learner;
pub mod model;
pub mod pctl;
pub mod planner;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use model::{
    belief_correct, belief_update, emission_logpdf, push_history, validate_model, Belief,
    Emission, ObsHistory, Trajectory, ValidationIssue, ValidationReport, VarPomdpModel,
};
pub use stats::RngStream;
pub use pctl::{check, parse_spec, CheckResult, PctlSpec, StatePartition};
pub use planner::{
    belief_set_density, extract_action, pbvi, value_at, AlphaVector, AlphaVectorSet, BeliefSet,
    BeliefStrategy, PlannerConfig,
};
