use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde_json::{json, Value};
use varpomdp::io::{load_beliefs, load_trajectory, parse_belief, save_trajectory};
use varpomdp::learner::{build_model, fit_bp_arhmm, LearnerConfig};
use varpomdp::planner::{select_belief_points, BeliefStrategy};
use varpomdp::simulator::{make_synthetic_corpus, simulate as run_simulation, CorpusSpec, Policy};
use varpomdp::{
    belief_set_density, extract_action, parse_spec, AlphaVectorSet, Belief, BeliefSet,
    CheckResult, PlannerConfig, RngStream, VarPomdpModel,
};

use crate::config::Layer;
use crate::{CheckArgs, DensityArgs, LearnArgs, PlanArgs, SimulateArgs, ValidateArgs};

pub type Outcome = Result<(Value, u8)>;

fn load_model(path: &Path) -> Result<VarPomdpModel> {
    let model = VarPomdpModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    model.ensure_valid()?;
    Ok(model)
}

fn parse_indices(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| t.trim().parse().with_context(|| format!("`{t}` is not an action index")))
        .collect()
}

pub fn simulate(args: SimulateArgs) -> Outcome {
    let rng = RngStream::new(args.seed);
    if let Some(path) = &args.corpus {
        let spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing corpus description {}", path.display()))?;
        let (model, series) = make_synthetic_corpus(&spec, &rng)?;
        fs::create_dir_all(&args.out)?;
        model.save(args.out.join("model.json"))?;
        let mut files = Vec::new();
        for (i, traj) in series.iter().enumerate() {
            let file = args.out.join(format!("series_{i}.csv"));
            save_trajectory(traj, &file)?;
            files.push(file.display().to_string());
        }
        let summary = json!({
            "model": args.out.join("model.json").display().to_string(),
            "trajectories": files,
            "num_modes": spec.num_modes,
            "length": spec.length,
        });
        return Ok((summary, 0));
    }
    let model = load_model(args.model.as_deref().expect("clap requires --model"))?;
    let init = match &args.init {
        Some(text) => parse_belief(text)?,
        None => Belief::uniform(model.num_states),
    };
    let policy = match (&args.actions, &args.alphas) {
        (Some(text), _) => Policy::Fixed(parse_indices(text)?),
        (None, Some(path)) => Policy::Alpha(
            serde_json::from_str(&fs::read_to_string(path)?)
                .with_context(|| format!("parsing alpha vectors {}", path.display()))?,
        ),
        (None, None) => Policy::UniformRandom,
    };
    let traj = run_simulation(&model, &policy, &init, None, args.steps, &rng)?;
    save_trajectory(&traj, &args.out)?;
    let mut visits = vec![0usize; model.num_states];
    for &s in traj.true_states.as_deref().unwrap_or_default() {
        visits[s] += 1;
    }
    let summary = json!({
        "trajectory": args.out.display().to_string(),
        "steps": traj.len(),
        "state_visits": visits,
    });
    Ok((summary, 0))
}

pub fn learn(args: LearnArgs) -> Outcome {
    let layer = Layer::load(args.config.as_deref())?;
    let mut config: LearnerConfig = layer.parse()?;
    config.seed = layer.seed(args.seed)?;
    if let Some(v) = args.order {
        config.var_order = v;
    }
    if let Some(v) = args.max_features {
        config.max_features = v;
    }
    if let Some(v) = args.sweeps {
        config.sweeps = v;
    }
    if let Some(v) = args.burn_in {
        config.burn_in = v;
    }
    if let Some(v) = args.chains {
        config.chains = v;
    }
    let delta = match args.delta {
        Some(d) => d,
        None => layer.get("delta")?.unwrap_or(0.05),
    };
    let series = args
        .trajectories
        .iter()
        .map(|p| load_trajectory(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_bp_arhmm(&series, &config)?;
    let best = &fit.best;
    let k = best.num_features();
    let mut labels: BTreeMap<usize, BTreeSet<String>> = (0..k).map(|s| (s, BTreeSet::new())).collect();
    if let Some(path) = &args.labels {
        let given: BTreeMap<usize, BTreeSet<String>> = serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing labels {}", path.display()))?;
        for (s, set) in given {
            ensure!(s < k, "label for state {s}, but only {k} states were learned");
            labels.insert(s, set);
        }
    }
    let has_actions = series.iter().all(|t| t.actions.is_some());
    fs::create_dir_all(&args.out_dir)?;
    let out = |name: &str| args.out_dir.join(name);
    let mut summary = json!({
        "num_states": k,
        "num_series": series.len(),
        "best_log_prob": best.log_prob,
        "best_sweep": best.sweep,
        "initial_log_probs": fit.initial_log_probs,
        "samples": fit.samples.len(),
        "modes": out("modes.csv").display().to_string(),
        "trace": out("trace.csv").display().to_string(),
    });
    if has_actions {
        let (model, estimate) = build_model(best, &series, &labels, delta)?;
        model.save(out("model.json"))?;
        fs::write(out("transitions.json"), serde_json::to_string_pretty(&estimate)? + "\n")?;
        summary["model"] = json!(out("model.json").display().to_string());
        summary["transitions"] = json!(out("transitions.json").display().to_string());
        summary["defaulted_rows"] = json!(estimate.defaulted_rows);
    } else {
        summary["model"] = Value::Null;
        summary["note"] = json!("trajectories carry no actions; model assembly skipped");
    }
    let mut modes = csv::Writer::from_path(out("modes.csv"))?;
    modes.write_record(["series", "t", "mode"])?;
    for (i, z) in best.mode_seqs.iter().enumerate() {
        for (t, m) in z.iter().enumerate() {
            modes.write_record([i.to_string(), t.to_string(), m.to_string()])?;
        }
    }
    modes.flush()?;
    let mut trace = csv::Writer::from_path(out("trace.csv"))?;
    trace.write_record(["chain", "sweep", "log_prob"])?;
    for (c, lp) in fit.traces.iter().enumerate() {
        for (s, v) in lp.iter().enumerate() {
            trace.write_record([c.to_string(), s.to_string(), format!("{v:?}")])?;
        }
    }
    trace.flush()?;
    Ok((summary, 0))
}

struct Checked {
    result: CheckResult,
    belief_set: BeliefSet,
    b0: Belief,
}

fn run_check(args: &CheckArgs) -> Result<Checked> {
    let model = load_model(&args.model)?;
    let spec = parse_spec(&args.spec)?;
    let b0 = parse_belief(&args.belief)?;
    let layer = Layer::load(args.config.as_deref())?;
    let mut config: PlannerConfig = layer.parse()?;
    config.seed = layer.seed(args.seed)?;
    if let Some(l) = args.mc_samples {
        config.mc_samples = l;
    }
    config.dedup |= args.dedup;
    let belief_set = match &args.points {
        Some(path) => BeliefSet::new(load_beliefs(path).with_context(|| format!("loading {}", path.display()))?)?,
        None => {
            let m = args.num_points.unwrap_or(2 * model.num_states);
            let rng = RngStream::new(config.seed).substream(&[u64::MAX]);
            select_belief_points(&model, &BeliefStrategy::CornersPlusRandom, m, &rng)?
        }
    };
    let result = varpomdp::check(&model, &b0, &spec, &belief_set, &config)?;
    Ok(Checked { result, belief_set, b0 })
}

fn check_summary(c: &Checked) -> Result<Value> {
    let last = c.result.alphas.last().expect("at least the initial set");
    let chosen: Vec<usize> = c
        .belief_set
        .points
        .iter()
        .map(|b| extract_action(last, b))
        .collect::<varpomdp::Result<_>>()?;
    Ok(json!({
        "p_max": c.result.p_max,
        "satisfied": c.result.satisfied,
        "horizon": c.result.horizon,
        "action": c.result.action,
        "alpha_vectors": last.vectors,
        "chosen_actions": chosen,
        "belief": c.b0,
    }))
}

fn exit_code(c: &Checked) -> u8 {
    if c.result.satisfied { 0 } else { 1 }
}

pub fn check(args: CheckArgs) -> Outcome {
    let c = run_check(&args)?;
    Ok((check_summary(&c)?, exit_code(&c)))
}

/// Beliefs from a CSV, one per row; a non-numeric first row is a header.
fn read_belief_rows(path: &Path) -> Result<Vec<Belief>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => out.push(Belief::new(v).with_context(|| format!("row {}", i + 1))?),
            Err(_) if i == 0 => continue,
            Err(_) => bail!("row {} of {} is not numeric", i + 1, path.display()),
        }
    }
    Ok(out)
}

pub fn plan(args: PlanArgs) -> Outcome {
    let c = run_check(&args.check)?;
    let mut summary = check_summary(&c)?;
    if let Some(path) = &args.emit_alphas {
        let sets: &[AlphaVectorSet] = &c.result.alphas;
        let mut f = fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(sets)?)?;
        summary["alphas"] = json!(path.display().to_string());
    }
    if let Some(path) = &args.policy {
        let last = c.result.alphas.last().expect("at least the initial set");
        let actions = read_belief_rows(path)?
            .iter()
            .map(|b| extract_action(last, b))
            .collect::<varpomdp::Result<Vec<_>>>()?;
        summary["policy"] = json!(actions);
    }
    Ok((summary, exit_code(&c)))
}

pub fn density(args: DensityArgs) -> Outcome {
    let set = BeliefSet::new(load_beliefs(&args.points)?)?;
    let eps = belief_set_density(&set, args.probes, &RngStream::new(args.seed));
    let summary = json!({
        "epsilon_b": eps,
        "num_points": set.len(),
        "num_states": set.num_states(),
        "probes": args.probes,
    });
    Ok((summary, 0))
}

pub fn validate(args: ValidateArgs) -> Outcome {
    let model = VarPomdpModel::load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let report = model.validate();
    let code = if report.is_valid() { 0 } else { 2 };
    Ok((report.to_json(), code))
}
