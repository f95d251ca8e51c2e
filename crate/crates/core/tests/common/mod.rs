//! Shared test support: random instances, the quadrature oracle and the
//! property suites run both by `properties` and by `acceptance`.

#![allow(dead_code)]

pub mod oracle;
pub mod props;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use varpomdp::{Belief, Emission, VarPomdpModel};

pub fn data_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn example3() -> (VarPomdpModel, Vec<Belief>) {
    let m = VarPomdpModel::load(data_path("data/example3/model.json")).unwrap();
    let b = varpomdp::io::load_beliefs(data_path("data/example3/beliefs.json")).unwrap();
    (m, b)
}

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Stochastic row with strictly positive weights.
pub fn row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(normalize)
}

pub fn belief(n: usize) -> impl Strategy<Value = Belief> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|mut w| {
        if w.iter().sum::<f64>() == 0.0 {
            w[0] = 1.0;
        }
        Belief::normalized(w).unwrap()
    })
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(-1.0f64..1.0, d * d), 0.05f64..2.0).prop_map(move |(v, ridge)| {
        let l = DMatrix::from_vec(d, d, v);
        &l * l.transpose() + DMatrix::identity(d, d) * ridge
    })
}

/// VAR-POMDP whose last state is labeled `goal` and absorbing; other rows are random.
pub fn model(
    states: std::ops::RangeInclusive<usize>,
    actions: std::ops::RangeInclusive<usize>,
    dims: std::ops::RangeInclusive<usize>,
    orders: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = VarPomdpModel> {
    (states, actions, dims, orders).prop_flat_map(|(n, a, d, r)| {
        let rows = prop::collection::vec(prop::collection::vec(row(n), n - 1), a);
        let emissions = prop::collection::vec(
            (
                prop::collection::vec(prop::collection::vec(-0.5f64..0.5, d * d), r),
                spd(d),
            ),
            n,
        );
        (rows, emissions).prop_map(move |(rows, emissions)| {
            let mut transitions = rows;
            for t in transitions.iter_mut() {
                let mut goal = vec![0.0; n];
                goal[n - 1] = 1.0;
                t.push(goal);
            }
            let mut labels = vec![BTreeSet::new(); n];
            labels[n - 1].insert("goal".to_string());
            VarPomdpModel {
                num_states: n,
                num_actions: a,
                obs_dim: d,
                var_order: r,
                transitions,
                emissions: emissions
                    .into_iter()
                    .map(|(lags, cov)| {
                        Emission::new(
                            lags.into_iter().map(|v| DMatrix::from_vec(d, d, v)).collect(),
                            cov,
                        )
                    })
                    .collect(),
                labels,
                state_names: None,
                action_names: None,
            }
        })
    })
}

/// Scalar zero-order model with the given standard deviations.
pub fn scalar_model(transitions: Vec<Vec<Vec<f64>>>, sigmas: &[f64]) -> VarPomdpModel {
    let n = sigmas.len();
    let mut labels = vec![BTreeSet::new(); n];
    labels[n - 1].insert("goal".to_string());
    VarPomdpModel {
        num_states: n,
        num_actions: transitions.len(),
        obs_dim: 1,
        var_order: 0,
        transitions,
        emissions: sigmas
            .iter()
            .map(|s| Emission::new(vec![], DMatrix::from_element(1, 1, s * s)))
            .collect(),
        labels,
        state_names: None,
        action_names: None,
    }
}

pub fn obs(d: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-3.0f64..3.0, d).prop_map(DVector::from_vec)
}

/// `3·sqrt(0.25/L)`.
pub fn mc_tol(samples: usize) -> f64 {
    varpomdp::planner::mc_tolerance(samples)
}
