//! Randomized invariant suites. Each returns the first failure as text so
//! the acceptance runner can report it instead of panicking.

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use varpomdp::planner::PartitionProbs;
use varpomdp::{
    belief_update, check, parse_spec, pbvi, value_at, Belief, BeliefSet, ObsHistory,
    PlannerConfig, RngStream, VarPomdpModel,
};

use super::{belief, model, obs};

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Model, corners plus two random interior points, horizon and seed.
fn planning_case(
    dims: std::ops::RangeInclusive<usize>,
    orders: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = (VarPomdpModel, BeliefSet, usize, u64)> {
    model(2..=3, 1..=2, dims, orders).prop_flat_map(|m| {
        let n = m.num_states;
        (
            Just(m),
            prop::collection::vec(belief(n), 2),
            1usize..=3,
            any::<u64>(),
        )
            .prop_map(move |(m, extra, h, seed)| {
                let mut points: Vec<Belief> = (0..n).map(|s| Belief::unit(n, s)).collect();
                points.extend(extra);
                (m, BeliefSet::new(points).unwrap(), h, seed)
            })
    })
}

fn goal_p0(m: &VarPomdpModel) -> Vec<f64> {
    let mut p0 = vec![0.0; m.num_states];
    p0[m.num_states - 1] = 1.0;
    p0
}

const SAMPLES: usize = 100;

pub fn filter_normalization(cases: u32) -> Result<(), String> {
    let strategy = model(1..=4, 1..=2, 1..=3, 0..=2).prop_flat_map(|m| {
        let (n, d, r) = (m.num_states, m.obs_dim, m.var_order);
        (
            Just(m),
            belief(n),
            prop::collection::vec(obs(d), r),
            obs(d),
            any::<prop::sample::Index>(),
        )
    });
    run(cases, strategy, |(m, b, lags, o, a)| {
        let mut h = ObsHistory::for_model(&m);
        for x in lags {
            h.push(x).unwrap();
        }
        let post = belief_update(&m, &b, a.index(m.num_actions), &o, &h)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let sum: f64 = post.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {sum}");
        prop_assert!(post.probs().iter().all(|&p| p >= 0.0));
        Ok(())
    })
}

pub fn alpha_bounds(cases: u32) -> Result<(), String> {
    run(cases, planning_case(1..=2, 0..=1), |(m, bs, h, seed)| {
        let cfg = PlannerConfig { mc_samples: SAMPLES, seed, ..Default::default() };
        let sets = pbvi(&m, &goal_p0(&m), h, &bs, &cfg).unwrap();
        for set in &sets {
            for v in &set.vectors {
                prop_assert!(
                    v.alpha.iter().all(|&x| (0.0..=1.0).contains(&x)),
                    "t={} alpha {:?}",
                    set.step,
                    v.alpha
                );
            }
        }
        Ok(())
    })
}

pub fn partition_rows(cases: u32) -> Result<(), String> {
    run(cases, planning_case(1..=2, 0..=1), |(m, bs, h, seed)| {
        let cfg = PlannerConfig { mc_samples: SAMPLES, seed, ..Default::default() };
        let sets = pbvi(&m, &goal_p0(&m), h, &bs, &cfg).unwrap();
        let prev = &sets[h - 1];
        let table = PartitionProbs::estimate(&m, &bs, prev, SAMPLES, &RngStream::new(seed)).unwrap();
        for i in 0..bs.len() {
            for a in 0..m.num_actions {
                for s in 0..m.num_states {
                    let total: f64 = (0..prev.len()).map(|k| table.prob(i, a, s, k)).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-9, "row ({i},{a},{s}) sums to {total}");
                }
            }
        }
        Ok(())
    })
}

/// `p_max` from `check` must not decrease as the step bound grows.
pub fn horizon_monotone(cases: u32, slack: f64) -> Result<(), String> {
    let strategy = planning_case(1..=2, 0..=1).prop_flat_map(|(m, bs, h, seed)| {
        let n = m.num_states;
        (Just((m, bs, h, seed)), belief(n))
    });
    run(cases, strategy, |((m, bs, h, seed), b0)| {
        let cfg = PlannerConfig { mc_samples: SAMPLES, seed, ..Default::default() };
        let mut last = 0.0;
        for k in 0..=h + 1 {
            let spec = parse_spec(&format!(r#"P>=0.5 [ true U<={k} "goal" ]"#)).unwrap();
            let p = check(&m, &b0, &spec, &bs, &cfg).unwrap().p_max;
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p >= last - slack, "k={k}: {p} after {last}");
            last = p;
        }
        Ok(())
    })
}

pub fn thread_determinism(cases: u32) -> Result<(), String> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    run(cases, planning_case(1..=2, 0..=1), |(m, bs, h, seed)| {
        let cfg = PlannerConfig { mc_samples: SAMPLES, seed, ..Default::default() };
        let p0 = goal_p0(&m);
        let a = one.install(|| pbvi(&m, &p0, h, &bs, &cfg).unwrap());
        let b = three.install(|| pbvi(&m, &p0, h, &bs, &cfg).unwrap());
        prop_assert_eq!(a, b);
        Ok(())
    })
}

pub fn partition_exhaustive(cases: u32) -> Result<(), String> {
    let names = ["a", "b", "c"];
    let formula = prop::sample::select(vec![
        "true", r#""a""#, r#"!"a""#, r#""b""#, r#"("a" & "b")"#, r#"!("b" & !"c")"#,
    ]);
    let strategy = (
        model(1..=5, 1..=1, 1..=1, 0..=0),
        prop::collection::vec(prop::collection::vec(any::<bool>(), 3), 5),
        formula.clone(),
        formula,
        0usize..5,
    );
    run(cases, strategy, |(mut m, marks, f1, f2, k)| {
        m.labels = marks[..m.num_states]
            .iter()
            .map(|row| {
                names
                    .iter()
                    .zip(row)
                    .filter(|(_, &on)| on)
                    .map(|(n, _)| n.to_string())
                    .collect::<BTreeSet<_>>()
            })
            .collect();
        let spec = parse_spec(&format!("P<0.3 [ {f1} U<={k} {f2} ]")).unwrap();
        let part = varpomdp::pctl::partition_states(&m, &spec).unwrap();
        let all: BTreeSet<usize> = (0..m.num_states).collect();
        let union: BTreeSet<usize> = part
            .s_yes
            .iter()
            .chain(&part.s_no)
            .chain(&part.s_q)
            .copied()
            .collect();
        prop_assert_eq!(&union, &all);
        prop_assert_eq!(part.s_yes.len() + part.s_no.len() + part.s_q.len(), m.num_states);
        for s in 0..m.num_states {
            prop_assert_eq!(part.p0[s] == 1.0, part.s_yes.contains(&s));
        }
        Ok(())
    })
}

/// Corner values never exceed the fully observable bound by more than the sampling slack.
pub fn corner_dominance(cases: u32) -> Result<(), String> {
    run(cases, planning_case(1..=2, 0..=1), |(m, bs, h, seed)| {
        let cfg = PlannerConfig { mc_samples: SAMPLES, seed, ..Default::default() };
        let p0 = goal_p0(&m);
        let sets = pbvi(&m, &p0, h, &bs, &cfg).unwrap();
        let bound = varpomdp::planner::mdp_upper_bound(&m, &p0, h);
        let slack = super::mc_tol(SAMPLES) * h as f64;
        for s in 0..m.num_states {
            let v = value_at(&sets[h], &Belief::unit(m.num_states, s)).unwrap();
            prop_assert!(v <= bound[s] + slack, "state {s}: {v} > {}", bound[s]);
        }
        Ok(())
    })
}
