use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FAIL_SPEC: &str = r#"P<=0.5 [ true U<=4 "Fail" ]"#;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varpomdp")).args(args).output().unwrap()
}

fn summary(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn example3_args<'a>(model: &'a str, points: &'a str) -> Vec<&'a str> {
    vec![
        "--model", model, "--belief", "1,0,0", "--spec", FAIL_SPEC, "--points", points,
        "--mc-samples", "1000", "--seed", "3",
    ]
}

#[test]
fn check_example3_is_violated() {
    let (m, p) = (data("example3/model.json"), data("example3/beliefs.json"));
    let mut args = vec!["check"];
    args.extend(example3_args(m.to_str().unwrap(), p.to_str().unwrap()));
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    let p_max = s["p_max"].as_f64().unwrap();
    assert!(p_max > 0.5 && p_max < 0.75);
    assert_eq!(s["satisfied"], false);
    assert_eq!(s["horizon"], 4);
    let vectors = s["alpha_vectors"].as_array().unwrap();
    assert_eq!(vectors.len(), 5);
    assert!(vectors.iter().all(|v| v["alpha"][2] == 1.0));
    assert_eq!(s["chosen_actions"].as_array().unwrap().len(), 5);
}

#[test]
fn satisfied_spec_exits_zero() {
    let (m, p) = (data("example3/model.json"), data("example3/beliefs.json"));
    let out = run(&[
        "check", "--model", m.to_str().unwrap(), "--belief", "1,0,0", "--spec",
        r#"P<=0.9 [ true U<=4 "Fail" ]"#, "--points", p.to_str().unwrap(), "--seed", "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(summary(&out)["satisfied"], true);
}

#[test]
fn validate_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(data("example3/model.json")).unwrap();
    let mut model: Value = serde_json::from_str(&text).unwrap();
    model["transitions"][0][1] = serde_json::json!([0.2, 0.5, 0.2]);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, model.to_string()).unwrap();
    let out = run(&["validate", "--model", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let s = summary(&out);
    assert_eq!(s["valid"], false);
    let issues = s["issues"].as_array().unwrap();
    assert!(!issues.is_empty());
    assert!(issues[0].as_str().unwrap().contains('1'));

    let ok = run(&["validate", "--model", data("example3/model.json").to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = data("example3/model.json");
    let paths: Vec<PathBuf> = ["a.csv", "b.csv", "c.csv"].iter().map(|f| dir.path().join(f)).collect();
    for (p, seed) in paths.iter().zip(["7", "7", "8"]) {
        let out = run(&[
            "simulate", "--model", m.to_str().unwrap(), "--steps", "50", "--seed", seed, "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(&paths[0]), read(&paths[1]));
    assert_ne!(read(&paths[0]), read(&paths[2]));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--steps", "3"]).status.code(), Some(2));
    let m = data("example3/model.json");
    let no_seed = run(&[
        "check", "--model", m.to_str().unwrap(), "--belief", "1,0,0", "--spec", FAIL_SPEC,
    ]);
    assert_eq!(no_seed.status.code(), Some(2));
    let bad_spec = run(&[
        "check", "--model", m.to_str().unwrap(), "--belief", "1,0,0", "--spec", "P<=1.5 [ X true ]",
        "--seed", "1",
    ]);
    assert_eq!(bad_spec.status.code(), Some(2));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn plan_writes_alphas_and_policy() {
    let dir = tempfile::tempdir().unwrap();
    let (m, p) = (data("example3/model.json"), data("example3/beliefs.json"));
    let alphas = dir.path().join("alphas.json");
    let beliefs = dir.path().join("stream.csv");
    std::fs::write(&beliefs, "b0,b1,b2\n1,0,0\n0,0,1\n0.3,0.4,0.3\n").unwrap();
    let mut args = vec!["plan"];
    args.extend(example3_args(m.to_str().unwrap(), p.to_str().unwrap()));
    args.extend(["--emit-alphas", alphas.to_str().unwrap(), "--policy", beliefs.to_str().unwrap()]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    let s = summary(&out);
    assert_eq!(s["policy"].as_array().unwrap().len(), 3);
    let sets: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(&alphas).unwrap()).unwrap();
    assert_eq!(sets.len(), 5);
    assert_eq!(sets[4]["t"], 4);
    assert_eq!(sets[4]["vectors"].as_array().unwrap().len(), 5);

    // The emitted vectors drive an alpha policy in `simulate`.
    let traj = dir.path().join("t.csv");
    let out = run(&[
        "simulate", "--model", m.to_str().unwrap(), "--alphas", alphas.to_str().unwrap(), "--init",
        "1,0,0", "--steps", "10", "--seed", "1", "--out", traj.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&traj).unwrap().lines().count(), 11);
}

#[test]
fn corpus_learn_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("corpus.json");
    std::fs::write(
        &spec,
        r#"{"num_modes": 2, "obs_dim": 2, "var_order": 1, "length": 300, "num_series": 2, "num_actions": 2}"#,
    )
    .unwrap();
    let corpus = dir.path().join("corpus");
    let out = run(&["simulate", "--corpus", spec.to_str().unwrap(), "--seed", "4", "--out", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let config = dir.path().join("learn.json");
    std::fs::write(&config, r#"{"r": 1, "K_max": 8, "sweeps": 80, "burn_in": 40, "delta": 0.1, "seed": 9}"#)
        .unwrap();
    let labels = dir.path().join("labels.json");
    std::fs::write(&labels, r#"{"0": ["safe"]}"#).unwrap();
    let learned = dir.path().join("learned");
    let s0 = corpus.join("series_0.csv");
    let s1 = corpus.join("series_1.csv");
    let out = run(&[
        "learn", s0.to_str().unwrap(), s1.to_str().unwrap(), "--config", config.to_str().unwrap(),
        "--labels", labels.to_str().unwrap(), "--sweeps", "60", "--out-dir", learned.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    let k = s["num_states"].as_u64().unwrap() as usize;
    assert!(k >= 1);

    let est: Value = serde_json::from_str(&std::fs::read_to_string(learned.join("transitions.json")).unwrap()).unwrap();
    assert_eq!(est["delta"], 0.1);
    let trace = std::fs::read_to_string(learned.join("trace.csv")).unwrap();
    // Three chains of 60 sweeps: the flag overrides the file's 80.
    assert_eq!(trace.lines().count(), 1 + 3 * 60);
    let modes = std::fs::read_to_string(learned.join("modes.csv")).unwrap();
    assert_eq!(modes.lines().count(), 1 + 600);

    let model = learned.join("model.json");
    let out = run(&["validate", "--model", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m["labels"][0][0], "safe");
    assert_eq!(m["num_actions"], 2);
}

#[test]
fn density_of_example3_points() {
    let p = data("example3/beliefs.json");
    let out = run(&["density", "--points", p.to_str().unwrap(), "--seed", "0", "--probes", "500"]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    let eps = s["epsilon_b"].as_f64().unwrap();
    assert!(eps > 0.0 && eps <= 2.0);
    assert_eq!(s["num_points"], 5);
}

#[test]
fn threads_flag_does_not_change_results() {
    let (m, p) = (data("example3/model.json"), data("example3/beliefs.json"));
    let mut one = vec!["--threads", "1", "check"];
    one.extend(example3_args(m.to_str().unwrap(), p.to_str().unwrap()));
    let mut three = vec!["--threads", "3", "check"];
    three.extend(example3_args(m.to_str().unwrap(), p.to_str().unwrap()));
    assert_eq!(run(&one).stdout, run(&three).stdout);
}
