//! `varpomdp`: simulate, learn, check, plan, density and validate.
//!
//! Every subcommand prints a JSON summary on stdout. Exit status is 0 on
//! success (or a satisfied specification), 1 when `check`/`plan` find the
//! specification violated, and 2 on any error.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "varpomdp", version, about = "Learn and check vector-autoregressive POMDPs")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a trajectory from a model, or a synthetic training corpus.
    Simulate(SimulateArgs),
    /// Fit a BP-AR-HMM to trajectory CSVs and assemble a VAR-POMDP.
    Learn(LearnArgs),
    /// Check a bounded-until specification from an initial belief.
    Check(CheckArgs),
    /// Like `check`, but can also write alpha vectors and evaluate a policy.
    Plan(PlanArgs),
    /// Estimate the density ε_B of a belief set.
    Density(DensityArgs),
    /// Report every invariant a model file violates.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Model JSON to simulate.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    model: Option<PathBuf>,
    /// Corpus description JSON (num_modes, obs_dim, var_order, length, num_series, ...).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of steps (model mode).
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Initial state distribution, e.g. "1,0,0" (default: uniform).
    #[arg(long)]
    init: Option<String>,
    /// Fixed action sequence, e.g. "0,1,1"; needs at least `--steps` entries.
    #[arg(long, conflicts_with = "alphas")]
    actions: Option<String>,
    /// Alpha-vector JSON (as written by `plan --emit-alphas`) used as the policy.
    #[arg(long)]
    alphas: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Trajectory CSV (model mode) or output directory (corpus mode).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LearnArgs {
    /// Trajectory CSVs; one series each.
    #[arg(required = true)]
    trajectories: Vec<PathBuf>,
    /// Learner config JSON (r, K_max, sweeps, burn_in, hypers, prior, delta, seed, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON object mapping state index to a list of labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    max_features: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Confidence parameter of the transition half-widths.
    #[arg(long)]
    delta: Option<f64>,
    /// Directory for model.json, transitions.json, modes.csv and trace.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    /// Initial belief, e.g. "1,0,0".
    #[arg(long)]
    belief: String,
    /// Specification, e.g. 'P<=0.5 [ true U<=4 "Fail" ]'.
    #[arg(long)]
    spec: String,
    /// Belief-set JSON; defaults to the unit beliefs plus `--num-points` random ones.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Size of the generated belief set when `--points` is absent.
    #[arg(long)]
    num_points: Option<usize>,
    /// Planner config JSON (mc_samples, seed, dedup).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop duplicate alpha vectors after each backup.
    #[arg(long)]
    dedup: bool,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    check: CheckArgs,
    /// Write the alpha-vector sets for every step to this JSON file.
    #[arg(long)]
    emit_alphas: Option<PathBuf>,
    /// CSV of beliefs, one per row; the summary lists the chosen action for each.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DensityArgs {
    /// Belief-set JSON.
    #[arg(long)]
    points: PathBuf,
    /// Uniform random probes on top of the grid used for up to three states.
    #[arg(long, default_value_t = 10_000)]
    probes: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Learn(a) => commands::learn(a),
        Command::Check(a) => commands::check(a),
        Command::Plan(a) => commands::plan(a),
        Command::Density(a) => commands::density(a),
        Command::Validate(a) => commands::validate(a),
    };
    match outcome {
        Ok((summary, code)) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
