//! Command-line front end over [`runner::run`].

pub mod runner;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use runner::{exit_code, run, ExperimentConfig, ExperimentKind, Manifest, Overrides, RunOutcome, OUT_DIR_ENV};

const SCHEMA: &str = r#"Every command reads one JSON config (unknown keys are rejected):

  {
    "kind":        optional, must match the command ("solve-lattice", ...)
    "model":       inline model document, or
    "model_file":  path to one, relative to the config file
    "lattice":     { "steps": M, "max_nodes": cap }
    "solver":      { "damping": 0.5, "tol": 1e-10, "max_iters": 5000,
                     "schedule": [0, 0.25, 0.5, 0.75, 1], "newton_enabled": true,
                     "newton_size_cap": 4000, "store_cross_z": true,
                     "initial_price": [..] }
    "validation":  { "samples": 10000, "seed": 0, "box_half_width": 5, "group_size": 4 }
    "allow_invalid": false
    "lq":          { "params": LQ, "steps": M, "agents": N, "securities": n,
                     "simulation": { "agents": N, "steps": M, "paths": P,
                                     "scheme": "exponential"|"lattice", "record_steps": [k..] } }
    "convergence": { "params": LQ, "family": "two_point"|"gaussian", "grid": [N..],
                     "paths": P, "steps": M, "gap_params": LQ, "gap_grid": [N..],
                     "gap_paths": P, "q": 8 }
    "stability":   { "params": LQ, "family": .., "agents": N, "steps": M,
                     "sizes": [h..], "kinds": ["flow", "terminal_curvature"] }
    "clearing":    { "params": LQ, "family": .., "lattice_agents": [N..],
                     "formula_agents": [N..], "steps": M }
    "seed":        u64, required by randomized experiments
    "output_dir":  directory for artifacts
  }

Model document:
  { "securities": n, "common_noise_dim": d0, "idio_noise_dim": d, "agent_count": N,
    "horizon": T, "discount": delta, "fee": [n*n row-major],
    "agents": [ { "gamma_f", "gamma_g", "gamma_l", "l0", "sigma0", "sigma",
                  "eps_f", "eps_g", "kappa" } ],   one entry is shared by all agents
    "initial_law": { "family": "gaussian"|"two_point", "mean": [n], "scale": s },
    "exogenous": { "common": { "level": [n], "loading": [n*d0] },
                   "idiosyncratic": { "level": [n], "loading": [n*d] } } }

LQ parameters:
  { "gamma_f", "gamma_g", "gamma_l", "lambda", "sigma0", "sigma", "l0", "m0", "s0",
    "horizon", "delta" }

Output directory precedence: --out, then $MFCLEAR_OUT_DIR, then "output_dir", then ./out.
Exit codes: 0 success, 1 solver non-convergence, 2 config or model error,
3 capacity guard, 4 I/O error."#;

#[derive(Debug, Parser)]
#[command(name = "mfclear", version, about = "Market-clearing equilibria and their mean-field limit", long_about = SCHEMA)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sampled assumption checks of a model.
    Validate(Common),
    /// N-agent equilibrium on a scenario lattice (Picard with continuation).
    SolveLattice(Common),
    /// N-agent equilibrium by global Newton on a tiny lattice.
    SolveNewton(Common),
    /// Mean-field limit on a representative lattice.
    SolveMkv(Common),
    /// Riccati loadings and gap variances of the LQ specialization.
    LqOracle(Common),
    /// Rate, stability and clearing experiments.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    Convergence(Common),
    Stability(Common),
    Clearing(Common),
}

impl Command {
    fn split(&self) -> (ExperimentKind, &Common) {
        match self {
            Command::Validate(c) => (ExperimentKind::Validate, c),
            Command::SolveLattice(c) => (ExperimentKind::SolveLattice, c),
            Command::SolveNewton(c) => (ExperimentKind::SolveNewton, c),
            Command::SolveMkv(c) => (ExperimentKind::SolveMkv, c),
            Command::LqOracle(c) => (ExperimentKind::LqOracle, c),
            Command::Experiment(Experiment::Convergence(c)) => (ExperimentKind::ExperimentConvergence, c),
            Command::Experiment(Experiment::Stability(c)) => (ExperimentKind::ExperimentStability, c),
            Command::Experiment(Experiment::Clearing(c)) => (ExperimentKind::ExperimentClearing, c),
        }
    }
}

/// Runs a parsed command; returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let (kind, common) = cli.command.split();
    if let Some(t) = common.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let result = std::fs::read_to_string(&common.config)
        .map_err(|e| crate::Error::Config(format!("cannot read {}: {e}", common.config.display())))
        .and_then(|text| ExperimentConfig::from_json(&text))
        .and_then(|cfg| {
            let ov = Overrides {
                out: common.out.clone(),
                seed: common.seed,
                base_dir: common.config.parent().map(PathBuf::from),
            };
            run(kind, cfg, &ov)
        });
    match result {
        Ok(outcome) => {
            for a in &outcome.artifacts {
                println!("{}", outcome.out_dir.join(a).display());
            }
            println!("{}", outcome.out_dir.join(&outcome.manifest).display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `std::env::args` and runs.
pub fn main() -> i32 {
    execute(&Cli::parse())
}
