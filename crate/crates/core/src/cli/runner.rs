//! Config-driven experiment runner.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{run_clearing, run_convergence, run_stability, ClearingConfig, ConvergenceConfig, StabilityConfig};
use crate::fbsde::{clearing_residual, solve_equilibrium, solve_global_newton, SolverConfig};
use crate::io::{fmt_f64, write_equilibrium, write_json, write_mkv, write_processes, write_table};
use crate::lattice::{ScenarioLattice, DEFAULT_MAX_NODES};
use crate::lqoracle::{
    continuous_riccati, deviation_variance, discrete_riccati, gap_variance, simulate_lq, LqScheme, SimulationOptions,
};
use crate::mfg::solve_mkv;
use crate::model::{validate_assumptions, InitialFamily, LqParams, MarketModel, ModelDocument, ValidationOptions};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "MFCLEAR_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Validate,
    SolveLattice,
    SolveNewton,
    SolveMkv,
    LqOracle,
    ExperimentConvergence,
    ExperimentStability,
    ExperimentClearing,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Validate => "validate",
            Self::SolveLattice => "solve-lattice",
            Self::SolveNewton => "solve-newton",
            Self::SolveMkv => "solve-mkv",
            Self::LqOracle => "lq-oracle",
            Self::ExperimentConvergence => "experiment-convergence",
            Self::ExperimentStability => "experiment-stability",
            Self::ExperimentClearing => "experiment-clearing",
        }
    }

    fn randomized(self, cfg: &ExperimentConfig) -> bool {
        match self {
            Self::ExperimentConvergence => true,
            Self::LqOracle => cfg.lq.as_ref().is_some_and(|l| l.simulation.is_some()),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub steps: usize,
    /// Cap on the total node count.
    #[serde(default)]
    pub max_nodes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqOracleSpec {
    pub params: LqParams,
    pub steps: usize,
    #[serde(default = "one")]
    pub agents: usize,
    #[serde(default = "one")]
    pub securities: usize,
    /// Monte Carlo ensemble of the finite and mean-field prices (needs a seed).
    #[serde(default)]
    pub simulation: Option<LqSimulationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqSimulationSpec {
    pub agents: usize,
    pub steps: usize,
    pub paths: usize,
    #[serde(default = "exponential")]
    pub scheme: LqScheme,
    #[serde(default)]
    pub record_steps: Option<Vec<usize>>,
}

fn exponential() -> LqScheme {
    LqScheme::Exponential
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the subcommand when given.
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub model: Option<ModelDocument>,
    /// Path to a model JSON, relative to the config file.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub lattice: Option<LatticeSpec>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub validation: ValidationOptions,
    /// Solve even when the sampled assumption checks fail.
    #[serde(default)]
    pub allow_invalid: bool,
    #[serde(default)]
    pub lq: Option<LqOracleSpec>,
    #[serde(default)]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    #[serde(default)]
    pub clearing: Option<ClearingConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Directory that relative `model_file` paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub version: String,
    pub wall_time_seconds: f64,
    pub status: String,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub manifest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn artifact_prefix(kind: ExperimentKind, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("{}-seed{s}", kind.name()),
        None => kind.name().to_string(),
    }
}

fn load_model(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<MarketModel> {
    match (&cfg.model, &cfg.model_file) {
        (Some(doc), None) => MarketModel::new(doc.clone()),
        (None, Some(path)) => {
            let full = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.clone(),
            };
            let text = std::fs::read_to_string(&full)
                .map_err(|e| Error::Config(format!("model file {}: {e}", full.display())))?;
            let doc: ModelDocument = serde_json::from_str(&text).map_err(|e| Error::Config(format!("model file: {e}")))?;
            MarketModel::new(doc)
        }
        (Some(_), Some(_)) => Err(Error::Config("give either `model` or `model_file`, not both".into())),
        (None, None) => Err(Error::Config("this command needs `model` or `model_file`".into())),
    }
}

fn lattice_for(cfg: &ExperimentConfig, model: &MarketModel, agents: usize) -> Result<ScenarioLattice> {
    let spec = cfg
        .lattice
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs `lattice.steps`".into()))?;
    let cap = spec.max_nodes.map_or(DEFAULT_MAX_NODES, u128::from);
    ScenarioLattice::with_capacity(
        spec.steps,
        agents,
        model.common_noise_dim(),
        model.idio_noise_dim(),
        model.horizon(),
        cap,
    )
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("this command needs `{what}`")))
}

fn check_assumptions(cfg: &ExperimentConfig, model: &MarketModel) -> Result<()> {
    let report = validate_assumptions(model, &cfg.validation);
    if !report.all_passed && !cfg.allow_invalid {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Error::invalid(format!(
            "assumption checks failed: {}; set `allow_invalid` to solve anyway",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// Executes `kind` under `cfg`. Artifacts and a manifest are written to the
/// output directory; on non-convergence the residual history is written
/// before the error is returned.
pub fn run(kind: ExperimentKind, mut cfg: ExperimentConfig, ov: &Overrides) -> Result<RunOutcome> {
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(Error::Config(format!("config is for `{}`, command is `{}`", k.name(), kind.name())));
        }
    }
    cfg.kind = Some(kind);
    if ov.seed.is_some() {
        cfg.seed = ov.seed;
    }
    if kind.randomized(&cfg) && cfg.seed.is_none() {
        return Err(Error::Config(format!("`{}` is randomized and needs a seed", kind.name())));
    }
    let out_dir = ov
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;
    let started = Instant::now();
    let prefix = artifact_prefix(kind, cfg.seed);
    let config_json = serde_json::to_string(&cfg)?;
    let result = execute(kind, &cfg, &out_dir, &prefix, ov.base_dir.as_deref());
    let (artifacts, status) = match &result {
        Ok(a) => (a.clone(), "ok".to_string()),
        Err(Error::NonConvergence { history, iterations, last }) => {
            let name = format!("{prefix}-residual_history.csv");
            write_table(
                &out_dir.join(&name),
                &["iteration", "residual"],
                history.iter().enumerate().map(|(i, r)| vec![(i + 1).to_string(), fmt_f64(*r)]),
            )?;
            (vec![name], format!("non-convergence after {iterations} iterations, residual {last:e}"))
        }
        Err(_) => (Vec::new(), "error".to_string()),
    };
    let mut manifest_name = String::new();
    if result.is_ok() || matches!(result, Err(Error::NonConvergence { .. })) {
        let mut entries = Vec::new();
        for f in &artifacts {
            let bytes = std::fs::read(out_dir.join(f))?;
            entries.push(ArtifactEntry {
                file: f.clone(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            kind: kind.name().into(),
            seed: cfg.seed,
            config_sha256: sha256_hex(config_json.as_bytes()),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
            status,
            artifacts: entries,
        };
        manifest_name = format!("{prefix}-manifest.json");
        write_json(&out_dir.join(&manifest_name), &manifest)?;
    }
    Ok(RunOutcome {
        out_dir,
        artifacts: result?,
        manifest: manifest_name,
    })
}

fn execute(kind: ExperimentKind, cfg: &ExperimentConfig, out: &Path, prefix: &str, base: Option<&Path>) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let json = |name: &str, value: &dyn erased::Json| -> Result<String> {
        let file = format!("{prefix}-{name}");
        value.write(&out.join(&file))?;
        Ok(file)
    };
    match kind {
        ExperimentKind::Validate => {
            let model = load_model(cfg, base)?;
            let mut opts = cfg.validation;
            if let Some(s) = cfg.seed {
                opts.seed = s;
            }
            let report = validate_assumptions(&model, &opts);
            files.push(json("assumptions.json", &report)?);
        }
        ExperimentKind::SolveLattice | ExperimentKind::SolveNewton => {
            let model = load_model(cfg, base)?;
            check_assumptions(cfg, &model)?;
            let lattice = lattice_for(cfg, &model, model.agent_count())?;
            let sol = if kind == ExperimentKind::SolveLattice {
                solve_equilibrium(&model, &lattice, &cfg.solver)?
            } else {
                solve_global_newton(&model, &lattice, &cfg.solver)?
            };
            files.extend(write_equilibrium(out, prefix, &sol)?);
            let res = clearing_residual(&sol, &model, &lattice)?;
            let name = format!("{prefix}-clearing.csv");
            write_processes(&out.join(&name), &[&res])?;
            files.push(name);
            files.push(json("diagnostics.json", &serde_json::json!({
                "diagnostics": sol.diagnostics,
                "solver_config": cfg.solver,
                "max_clearing_residual": res.max_abs(),
                "rate_scale": sol.rate_scale(&model),
            }))?);
        }
        ExperimentKind::SolveMkv => {
            let model = load_model(cfg, base)?;
            check_assumptions(cfg, &model)?;
            let rep = model.with_agent_count(1)?;
            let lattice = lattice_for(cfg, &rep, 1)?;
            let sol = solve_mkv(&rep, &lattice, &cfg.solver)?;
            files.extend(write_mkv(out, prefix, &sol)?);
            files.push(json("diagnostics.json", &serde_json::json!({
                "diagnostics": sol.diagnostics,
                "solver_config": cfg.solver,
                "atoms": sol.atoms,
                "weights": sol.weights,
            }))?);
        }
        ExperimentKind::LqOracle => {
            let spec = require(&cfg.lq, "lq")?;
            let p = &spec.params;
            let c = continuous_riccati(p, spec.steps)?;
            let d = discrete_riccati(p, spec.steps)?;
            let g = gap_variance(p, spec.securities, spec.agents, spec.steps)?;
            let u = deviation_variance(p, spec.steps)?;
            let name = format!("{prefix}-riccati.csv");
            write_table(
                &out.join(&name),
                &[
                    "t",
                    "P",
                    "q",
                    "p",
                    "P_discrete",
                    "q_discrete",
                    "p_discrete",
                    "gap_variance",
                    "price_gap",
                    "deviation_variance",
                ],
                (0..=spec.steps).map(|k| {
                    [c.grid[k], c.mean[k], c.offset[k], c.deviation[k], d.mean[k], d.offset[k], d.deviation[k], g.variance[k], g.price_gap[k], u[k]]
                        .iter()
                        .map(|v| fmt_f64(*v))
                        .collect()
                }),
            )?;
            files.push(name);
            files.push(json("riccati.json", &serde_json::json!({ "continuous": c, "discrete": d }))?);
            if let Some(sim) = &spec.simulation {
                let ens = simulate_lq(
                    p,
                    InitialFamily::Gaussian,
                    &SimulationOptions {
                        agents: sim.agents,
                        steps: sim.steps,
                        paths: sim.paths,
                        seed: cfg.seed.unwrap_or_default(),
                        scheme: sim.scheme,
                        record_steps: sim.record_steps.clone(),
                        per_agent: false,
                    },
                )?;
                let name = format!("{prefix}-ensemble.csv");
                ens.write_csv(&out.join(&name))?;
                files.push(name);
                let predicted = gap_variance(p, 1, sim.agents, sim.steps)?;
                let summary: Vec<_> = ens
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| {
                        let (mean, stderr) = ens.gap_moment(j);
                        serde_json::json!({
                            "step": k,
                            "t": ens.times[j],
                            "price_gap": mean,
                            "stderr": stderr,
                            "predicted": predicted.price_gap[k],
                        })
                    })
                    .collect();
                files.push(json("ensemble_summary.json", &summary)?);
            }
        }
        ExperimentKind::ExperimentConvergence => {
            let c = require(&cfg.convergence, "convergence")?;
            let report = run_convergence(c, cfg.seed.unwrap_or_default())?;
            let j = format!("{prefix}-rate.json");
            report.write_json(&out.join(&j))?;
            let k = format!("{prefix}-rate.csv");
            report.write_csv(&out.join(&k))?;
            files.push(j);
            files.push(k);
        }
        ExperimentKind::ExperimentStability => {
            let c = require(&cfg.stability, "stability")?;
            let report = run_stability(c, &cfg.solver)?;
            let name = format!("{prefix}-stability.csv");
            write_table(
                &out.join(&name),
                &["kind", "h", "lhs", "rhs", "ratio", "gap_lhs", "gap_rhs", "gap_ratio"],
                report.rows.iter().map(|r| {
                    let kind = serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                    let mut row = vec![kind];
                    row.extend(
                        [r.h, r.solution.lhs, r.solution.rhs, r.solution.ratio, r.price_gap.lhs, r.price_gap.rhs, r.price_gap.ratio]
                            .iter()
                            .map(|v| fmt_f64(*v)),
                    );
                    row
                }),
            )?;
            files.push(name);
            files.push(json("stability.json", &report)?);
        }
        ExperimentKind::ExperimentClearing => {
            let c = require(&cfg.clearing, "clearing")?;
            let report = run_clearing(c, &cfg.solver)?;
            let name = format!("{prefix}-clearing.csv");
            write_table(
                &out.join(&name),
                &["N", "source", "l2"],
                report.points.iter().map(|p| vec![p.agents.to_string(), p.source.clone(), fmt_f64(p.l2)]),
            )?;
            files.push(name);
            files.push(json("clearing.json", &report)?);
        }
    }
    Ok(files)
}

mod erased {
    use std::path::Path;

    pub trait Json {
        fn write(&self, path: &Path) -> crate::Result<()>;
    }

    impl<T: serde::Serialize> Json for T {
        fn write(&self, path: &Path) -> crate::Result<()> {
            crate::io::write_json(path, self)
        }
    }
}

/// Process exit code for an error: 1 solver failure, 2 configuration or
/// model error, 3 capacity guard, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonConvergence { .. } | Error::SingularJacobian { .. } => 1,
        Error::Capacity { .. } => 3,
        Error::Io(_) | Error::Csv(_) => 4,
        _ => 2,
    }
}
