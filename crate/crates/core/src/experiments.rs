//! Convergence, clearing and stability experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{solve_decoupled, solve_equilibrium, EquilibriumSolution, SolverConfig};
use crate::lattice::{AdaptedProcess, ScenarioLattice};
use crate::lqoracle::{simulate_lq, LqScheme, SimulationOptions};
use crate::metrics::{
    difference_terms, fit_loglog_slope, lq_moments, price_gap_bound_check, price_gap_lhs,
    sample_conditional_w2, stability_bound_check, w2_discrete_1d, BoundCheck, EmpiricalMeasure, LogLogFit,
    RateExperimentReport, RatePoint,
};
use crate::mfg::{lq_clearing_residual, mfg_clearing_residual, solve_mkv, MkvSolution};
use crate::model::{CoefficientBundle, InitialFamily, LqParams, MarketModel};

fn seed_for(seed: u64, cell: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(cell)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Parameters of the W2 statistic.
    pub params: LqParams,
    pub family: InitialFamily,
    pub grid: Vec<usize>,
    pub paths: usize,
    pub steps: usize,
    /// Parameters of the price-gap statistic (Gaussian initial law).
    pub gap_params: LqParams,
    pub gap_grid: Vec<usize>,
    pub gap_paths: usize,
    #[serde(default = "default_q")]
    pub q: u32,
}

fn default_q() -> u32 {
    8
}

impl ConvergenceConfig {
    pub fn desk(params: LqParams, gap_params: LqParams) -> Self {
        Self {
            params,
            family: InitialFamily::TwoPoint,
            grid: vec![100, 1_000, 10_000, 100_000],
            paths: 10_000,
            steps: 20,
            gap_params,
            gap_grid: vec![10, 100, 1_000, 10_000],
            gap_paths: 100_000,
            q: 8,
        }
    }
}

/// Rate of the empirical conditional law and of the price gap in `N`.
pub fn run_convergence(cfg: &ConvergenceConfig, seed: u64) -> Result<RateExperimentReport> {
    let w2 = cfg
        .grid
        .par_iter()
        .enumerate()
        .map(|(j, &n)| sample_conditional_w2(&cfg.params, cfg.family, n, cfg.paths, seed_for(seed, j as u64), cfg.steps))
        .collect::<Result<Vec<_>>>()?;
    let price_gap = cfg
        .gap_grid
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let ens = simulate_lq(
                &cfg.gap_params,
                InitialFamily::Gaussian,
                &SimulationOptions {
                    agents: n,
                    steps: cfg.steps,
                    paths: cfg.gap_paths,
                    seed: seed_for(seed, 1000 + j as u64),
                    scheme: LqScheme::Exponential,
                    record_steps: None,
                    per_agent: false,
                },
            )?;
            let (value, stderr) = (0..ens.times.len())
                .map(|k| ens.gap_moment(k))
                .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
            Ok(RatePoint { agents: n, value, stderr })
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = |pts: &[RatePoint]| fit_loglog_slope(&pts.iter().map(|p| (p.agents as f64, p.value)).collect::<Vec<_>>());
    let (gamma_moment, gamma_g_moment) = lq_moments(&cfg.params, cfg.family, cfg.q, 4096, seed_for(seed, 2000), cfg.steps)?;
    Ok(RateExperimentReport {
        grid: cfg.grid.clone(),
        w2_fit: fit(&w2)?,
        price_gap_fit: fit(&price_gap)?,
        w2,
        price_gap,
        q: cfg.q,
        gamma_moment,
        gamma_g_moment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearingConfig {
    pub params: LqParams,
    pub family: InitialFamily,
    /// Population sizes solved on lattices.
    pub lattice_agents: Vec<usize>,
    /// Population sizes evaluated with the discrete LQ formula.
    pub formula_agents: Vec<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingPoint {
    pub agents: usize,
    pub l2: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingReport {
    pub points: Vec<ClearingPoint>,
    pub fit: LogLogFit,
}

/// Per-capita clearing error of `φ^MFG` across population sizes.
pub fn run_clearing(cfg: &ClearingConfig, solver: &SolverConfig) -> Result<ClearingReport> {
    let rep = MarketModel::from_lq(&cfg.params, 1, 1, 1, 1, cfg.family)?;
    let mkv = solve_mkv(&rep, &rep.representative_lattice(cfg.steps)?, solver)?;
    let mut points = Vec::new();
    for &n in &cfg.lattice_agents {
        let model = rep.with_agent_count(n)?;
        let lattice = model.lattice(cfg.steps)?;
        let r = mfg_clearing_residual(&mkv, &model, &lattice, solver)?;
        points.push(ClearingPoint {
            agents: n,
            l2: r.l2,
            source: "lattice".into(),
        });
    }
    for &n in &cfg.formula_agents {
        let r = lq_clearing_residual(&cfg.params, 1, n, cfg.steps, cfg.family)?;
        points.push(ClearingPoint {
            agents: n,
            l2: r.l2,
            source: "lq_formula".into(),
        });
    }
    let fit = fit_loglog_slope(&points.iter().map(|p| (p.agents as f64, p.l2)).collect::<Vec<_>>())?;
    Ok(ClearingReport { points, fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `l0 ↦ l0 + h·η_i`.
    Flow,
    /// `γ^g ↦ γ^g + h·η_i`.
    TerminalCurvature,
}

/// Agent weights `η_i = 1 + i/2` of the heterogeneous perturbation.
pub fn perturbation_pattern(agent: usize) -> f64 {
    1.0 + 0.5 * agent as f64
}

pub fn perturbed_model(base: &MarketModel, kind: PerturbationKind, h: f64) -> Result<MarketModel> {
    let agents: Vec<CoefficientBundle> = (0..base.agent_count())
        .map(|i| {
            let mut b = base.agent(i).clone();
            let e = h * perturbation_pattern(i);
            match kind {
                PerturbationKind::Flow => b.l0 += e,
                PerturbationKind::TerminalCurvature => b.gamma_g += e,
            }
            b
        })
        .collect();
    base.with_agents(agents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub params: LqParams,
    pub family: InitialFamily,
    pub agents: usize,
    pub steps: usize,
    /// Perturbation sizes; the first one calibrates the price-gap constant.
    pub sizes: Vec<f64>,
    pub kinds: Vec<PerturbationKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub kind: PerturbationKind,
    pub h: f64,
    pub solution: BoundCheck,
    pub price_gap: BoundCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    /// Per kind: largest relative spread of the solution ratio across sizes.
    pub ratio_spread: Vec<(PerturbationKind, f64)>,
    /// Per kind: calibrated constant `C` (twice the reference ratio).
    pub calibrated: Vec<(PerturbationKind, f64)>,
    pub price_gap_holds: bool,
}

/// `(sup_k E[W2²(μ̄^N_k, L^0_k)], E[W2²(μ̄^N_g, L^0_g)])` for the mean-field
/// adjoints of `agents` copies placed on `lattice`, one security.
pub fn conditional_w2_terms(
    mkv: &MkvSolution,
    ys: &[AdaptedProcess],
    gs: &[Vec<f64>],
    rep_model: &MarketModel,
    rep_lattice: &ScenarioLattice,
    lattice: &ScenarioLattice,
) -> Result<(f64, f64)> {
    if mkv.securities() != 1 {
        return Err(Error::Domain("the conditional W2 terms are computed for one security".into()));
    }
    let m = lattice.steps();
    // conditional laws per common group on the representative lattice
    let law = |k: usize, values: &dyn Fn(usize, usize) -> f64| -> Result<Vec<EmpiricalMeasure>> {
        let groups = rep_lattice.common_groups(k);
        let mut pts: Vec<Vec<Vec<f64>>> = vec![Vec::new(); groups];
        let mut wts: Vec<Vec<f64>> = vec![Vec::new(); groups];
        let per_group = rep_lattice.node_count(k) / groups;
        for (a, w) in mkv.weights.iter().enumerate() {
            for node in 0..rep_lattice.node_count(k) {
                let g = rep_lattice.common_index(k, node);
                pts[g].push(vec![values(a, node)]);
                wts[g].push(w / per_group as f64);
            }
        }
        pts.into_iter()
            .zip(wts)
            .map(|(p, w)| {
                let s: f64 = w.iter().sum();
                EmpiricalMeasure::new(p, w.iter().map(|v| v / s).collect())
            })
            .collect()
    };
    let w2_at = |k: usize, laws: &[EmpiricalMeasure], sample: &dyn Fn(usize, usize) -> f64| -> Result<Vec<f64>> {
        (0..lattice.node_count(k))
            .map(|node| {
                let emp = EmpiricalMeasure::from_scalars(&(0..ys.len()).map(|i| sample(i, node)).collect::<Vec<_>>())?;
                Ok(w2_discrete_1d(&emp, &laws[lattice.common_index(k, node)])?.powi(2))
            })
            .collect()
    };
    let mut sup = 0.0f64;
    for k in 0..=m {
        let laws = law(k, &|a, node| mkv.y[a].at(k, node)[0])?;
        let vals = w2_at(k, &laws, &|i, node| ys[i].at(k, node)[0])?;
        sup = sup.max(lattice.mean_scalar(k, &vals));
    }
    let b = rep_model.agent(0);
    let laws = law(m, &|a, node| {
        let mut o = [0.0];
        b.dgdx(mkv.x[a].at(m, node), &[0.0], &[0.0], &mut o);
        o[0]
    })?;
    let vals = w2_at(m, &laws, &|i, node| gs[i][node])?;
    let g_term = lattice.mean_scalar(m, &vals);
    Ok((sup, g_term))
}

/// Stability of the N-agent system under heterogeneous perturbations,
/// and the price gap to the unperturbed mean-field price.
pub fn run_stability(cfg: &StabilityConfig, solver: &SolverConfig) -> Result<StabilityReport> {
    if cfg.sizes.is_empty() {
        return Err(Error::Config("stability experiment needs at least one size".into()));
    }
    let base = MarketModel::from_lq(&cfg.params, 1, 1, 1, cfg.agents, cfg.family)?;
    if base.exogenous() != &Default::default() {
        return Err(Error::Config("stability experiment expects no exogenous inputs".into()));
    }
    let lattice = base.lattice(cfg.steps)?;
    let base_sol = solve_equilibrium(&base, &lattice, solver)?;

    let rep = base.with_agent_count(1)?;
    let rep_lattice = rep.representative_lattice(cfg.steps)?;
    let mkv = solve_mkv(&rep, &rep_lattice, solver)?;
    let price = mkv.price_on(&lattice)?;
    let decoupled: Vec<_> = (0..cfg.agents)
        .map(|i| solve_decoupled(&base, &lattice, i, &price, solver))
        .collect::<Result<_>>()?;
    let ys: Vec<AdaptedProcess> = decoupled.iter().map(|d| d.y.clone()).collect();
    let m = cfg.steps;
    let gs: Vec<Vec<f64>> = decoupled
        .iter()
        .enumerate()
        .map(|(i, d)| {
            (0..lattice.node_count(m))
                .map(|node| {
                    let mut o = [0.0];
                    base.agent(i).dgdx(d.x.at(m, node), &[0.0], &[0.0], &mut o);
                    o[0]
                })
                .collect()
        })
        .collect();
    let (w2_flow, w2_terminal) = conditional_w2_terms(&mkv, &ys, &gs, &rep, &rep_lattice, &lattice)?;
    let w2_terms = w2_flow + w2_terminal;

    let mut rows = Vec::new();
    let mut ratio_spread = Vec::new();
    let mut calibrated = Vec::new();
    let mut holds = true;
    for &kind in &cfg.kinds {
        let mut ratios = Vec::new();
        let mut c = None;
        for &h in &cfg.sizes {
            let pert = perturbed_model(&base, kind, h)?;
            let sol: EquilibriumSolution = solve_equilibrium(&pert, &lattice, solver)?;
            let terms = difference_terms(&base, &pert, &sol, &lattice)?;
            let solution = stability_bound_check(&base_sol, &sol, &terms, &lattice)?;
            let lhs = price_gap_lhs(&sol.phi, &price, &lattice)?;
            let gap = price_gap_bound_check(lhs, w2_terms, terms.total(&lattice) / cfg.agents as f64);
            let cc = *c.get_or_insert(2.0 * gap.ratio);
            holds &= gap.ratio <= cc;
            ratios.push(solution.ratio);
            rows.push(StabilityRow {
                kind,
                h,
                solution,
                price_gap: gap,
            });
        }
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        ratio_spread.push((kind, (hi - lo) / lo));
        calibrated.push((kind, c.unwrap()));
    }
    Ok(StabilityReport {
        rows,
        ratio_spread,
        calibrated,
        price_gap_holds: holds,
    })
}
