//! Adjoint systems on the scenario lattice: the single-agent best response to
//! a given price, the N-agent clearing equilibrium by damped Picard
//! iteration with continuation, and a global Newton oracle for tiny
//! instances.

pub(crate) mod engine;
mod newton;

pub use newton::{newton_residual, solve_global_newton};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{AdaptedProcess, Measurability, ScenarioLattice};
use crate::model::MarketModel;

use engine::{martingale_blocks, to_process, Coupling, Engine, Member, Steps};

/// Auxiliary inputs of the continuation system, one entry per agent.
/// All empty for the equilibrium itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuxInputs {
    /// `I^b`, added to the forward drift.
    pub forward: Vec<AdaptedProcess>,
    /// `I^f`, added to the backward driver.
    pub driver: Vec<AdaptedProcess>,
    /// `η`, added to the terminal value; leaf values flat `node·n + c`.
    pub terminal: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub schedule: Vec<f64>,
    pub newton_enabled: bool,
    /// Largest unknown count accepted by the Newton oracle.
    pub newton_size_cap: usize,
    /// Keep `Z^{i,j}` for `j ≠ i`.
    pub store_cross_z: bool,
    /// Constant initial price guess per security (default zero).
    pub initial_price: Option<Vec<f64>>,
    #[serde(skip)]
    pub aux: Option<AuxInputs>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iters: 5000,
            schedule: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            newton_enabled: true,
            newton_size_cap: 4000,
            store_cross_z: true,
            initial_price: None,
            aux: None,
        }
    }
}

impl SolverConfig {
    pub(crate) fn schedule_checked(&self) -> Result<&[f64]> {
        let s = &self.schedule;
        let ok = !s.is_empty()
            && s[0] == 0.0
            && *s.last().unwrap() == 1.0
            && s.windows(2).all(|w| w[0] < w[1]);
        if !ok && !(s.len() == 1 && s[0] == 1.0) {
            return Err(Error::Config(format!("continuation schedule must increase from 0 to 1, got {s:?}")));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub rho: f64,
    pub iterations: usize,
    pub residual: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub solver: String,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub stages: Vec<StageDiagnostics>,
    pub cross_z_stored: bool,
}

/// Node-indexed equilibrium. `z0[i]` has `n·d0` components per node; `zij[i]`
/// has `n·N·d` (all blocks) or `n·d` (own block only, see diagnostics),
/// both on steps `0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub x: Vec<AdaptedProcess>,
    pub y: Vec<AdaptedProcess>,
    pub z0: Vec<AdaptedProcess>,
    pub zij: Vec<AdaptedProcess>,
    pub phi: AdaptedProcess,
    pub diagnostics: Diagnostics,
}

impl EquilibriumSolution {
    pub fn agents(&self) -> usize {
        self.y.len()
    }

    /// Trading rate `α̂(Y^i, φ)` of `agent`.
    pub fn rate(&self, model: &MarketModel, agent: usize) -> AdaptedProcess {
        let n = model.securities();
        let y = &self.y[agent];
        let values = (0..y.steps())
            .map(|k| {
                let mut out = vec![0.0; y.step(k).len()];
                for (node, o) in out.chunks_mut(n).enumerate() {
                    let r = model.optimal_rate(&y.step(k)[node * n..(node + 1) * n], self.phi.at(k, node));
                    o.copy_from_slice(&r);
                }
                out
            })
            .collect();
        AdaptedProcess::from_steps(n, Measurability::Full, values)
    }

    /// Largest `|Λ^{-1}(Y^i + φ)|_∞` scale over nodes and agents.
    pub fn rate_scale(&self, model: &MarketModel) -> f64 {
        let n = model.securities();
        let inv = model.fee_inverse();
        let row_sum = (0..n)
            .map(|r| (0..n).map(|c| inv[r * n + c].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let ymax = self.y.iter().map(|y| y.max_abs()).fold(0.0, f64::max);
        row_sum * (ymax + self.phi.max_abs())
    }
}

/// Best response of one agent to an exogenous price.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledSolution {
    pub x: AdaptedProcess,
    pub y: AdaptedProcess,
    pub z0: AdaptedProcess,
    /// Own idiosyncratic block, `n·d` components per node.
    pub zi: AdaptedProcess,
    pub diagnostics: Diagnostics,
}

fn homotopy_gamma(model: &MarketModel) -> f64 {
    let g = model.agents().iter().map(|b| b.gamma_compat()).fold(f64::INFINITY, f64::min);
    if g.is_finite() && g > 0.0 {
        g
    } else {
        1.0
    }
}

pub(crate) fn check_price(price: &AdaptedProcess, model: &MarketModel, lattice: &ScenarioLattice) -> Result<()> {
    if price.dim() != model.securities() {
        return Err(Error::Adaptedness("price dimension differs from the security count".into()));
    }
    price.check_on(lattice).map_err(|e| match e {
        Error::Shape(msg) => Error::Adaptedness(format!("price: {msg}")),
        other => other,
    })
}

fn initial_adjoints(model: &MarketModel, lattice: &ScenarioLattice, count: usize, config: &SolverConfig) -> Result<Vec<Steps>> {
    let n = model.securities();
    let guess = match &config.initial_price {
        Some(p) if p.len() != n => return Err(Error::Config("initial price guess has wrong dimension".into())),
        Some(p) => p.clone(),
        None => vec![0.0; n],
    };
    let y: Steps = (0..=lattice.steps())
        .map(|k| guess.iter().map(|v| -v).cycle().take(lattice.node_count(k) * n).collect())
        .collect();
    Ok(vec![y; count])
}

/// Solves the adjoint system of `agent` for the given price: damped
/// forward/backward sweeps with terminal `Y_M = −δφ_M + ∂ḡ(X_M)`.
pub fn solve_decoupled(
    model: &MarketModel,
    lattice: &ScenarioLattice,
    agent: usize,
    price: &AdaptedProcess,
    config: &SolverConfig,
) -> Result<DecoupledSolution> {
    model.check_lattice(lattice)?;
    check_price(price, model, lattice)?;
    if agent >= lattice.agents() || agent >= model.agent_count() {
        return Err(Error::shape(format!("agent {agent} not on this lattice")));
    }
    let n = model.securities();
    let phi: Steps = (0..=lattice.steps()).map(|k| price.step(k).to_vec()).collect();
    let x0 = model.initial_law().lattice_positions(model.agent_count())[agent].clone();
    let engine = Engine {
        model,
        lattice,
        members: vec![Member {
            bundle: model.agent(agent),
            lattice_agent: agent,
            x0,
            weight: 1.0,
        }],
        coupling: Coupling::Exogenous(&phi),
        gamma: homotopy_gamma(model),
        aux: None,
    };
    let single = SolverConfig {
        schedule: vec![1.0],
        aux: None,
        ..config.clone()
    };
    let init = initial_adjoints(model, lattice, 1, config)?;
    let out = engine.run(&single, init)?;
    let y = out.ys.into_iter().next().unwrap();
    let (z0, zi) = martingale_blocks(lattice, &y, n, agent, false)?;
    Ok(DecoupledSolution {
        x: to_process(out.xs.into_iter().next().unwrap(), n, Measurability::Full),
        y: to_process(y, n, Measurability::Full),
        z0: AdaptedProcess::from_steps(n * lattice.common_dim(), Measurability::Full, z0),
        zi: AdaptedProcess::from_steps(n * lattice.idio_dim(), Measurability::Full, zi),
        diagnostics: Diagnostics {
            solver: "decoupled".into(),
            iterations: out.iterations,
            residual: out.residual,
            history: out.history,
            stages: out.stages,
            cross_z_stored: false,
        },
    })
}

/// N-agent clearing equilibrium `φ = −(1/N)Σ_i Y^i` by damped Picard
/// iteration over the continuation schedule.
pub fn solve_equilibrium(model: &MarketModel, lattice: &ScenarioLattice, config: &SolverConfig) -> Result<EquilibriumSolution> {
    model.check_lattice(lattice)?;
    if lattice.agents() != model.agent_count() {
        return Err(Error::shape(format!(
            "lattice hosts {} agents, model has {}",
            lattice.agents(),
            model.agent_count()
        )));
    }
    if let Some(aux) = &config.aux {
        check_aux(aux, model, lattice)?;
    }
    let positions = model.initial_law().lattice_positions(model.agent_count());
    let members = (0..model.agent_count())
        .map(|i| Member {
            bundle: model.agent(i),
            lattice_agent: i,
            x0: positions[i].clone(),
            weight: 1.0 / model.agent_count() as f64,
        })
        .collect();
    let engine = Engine {
        model,
        lattice,
        members,
        coupling: Coupling::Mean,
        gamma: homotopy_gamma(model),
        aux: config.aux.as_ref(),
    };
    let init = initial_adjoints(model, lattice, model.agent_count(), config)?;
    let out = engine.run(config, init)?;
    assemble(model, lattice, out.xs, out.ys, out.phi, config.store_cross_z, Diagnostics {
        solver: "picard".into(),
        iterations: out.iterations,
        residual: out.residual,
        history: out.history,
        stages: out.stages,
        cross_z_stored: config.store_cross_z,
    })
}

fn check_aux(aux: &AuxInputs, model: &MarketModel, lattice: &ScenarioLattice) -> Result<()> {
    let nag = model.agent_count();
    let n = model.securities();
    for p in aux.forward.iter().chain(&aux.driver) {
        if p.dim() != n {
            return Err(Error::shape("auxiliary input dimension differs from n"));
        }
        p.check_on(lattice)?;
    }
    if aux.forward.len() > nag || aux.driver.len() > nag || aux.terminal.len() > nag {
        return Err(Error::shape("more auxiliary inputs than agents"));
    }
    for t in &aux.terminal {
        if t.len() != lattice.node_count(lattice.steps()) * n {
            return Err(Error::shape("terminal auxiliary input has wrong length"));
        }
    }
    Ok(())
}

pub(crate) fn assemble(
    model: &MarketModel,
    lattice: &ScenarioLattice,
    xs: Vec<Steps>,
    ys: Vec<Steps>,
    phi: Steps,
    cross: bool,
    diagnostics: Diagnostics,
) -> Result<EquilibriumSolution> {
    let n = model.securities();
    let mut z0 = Vec::with_capacity(ys.len());
    let mut zij = Vec::with_capacity(ys.len());
    let wz = if cross { lattice.agents() * lattice.idio_dim() } else { lattice.idio_dim() };
    for (i, y) in ys.iter().enumerate() {
        let (a, b) = martingale_blocks(lattice, y, n, i, cross)?;
        z0.push(AdaptedProcess::from_steps(n * lattice.common_dim(), Measurability::Full, a));
        zij.push(AdaptedProcess::from_steps(n * wz, Measurability::Full, b));
    }
    Ok(EquilibriumSolution {
        x: xs.into_iter().map(|v| to_process(v, n, Measurability::Full)).collect(),
        y: ys.into_iter().map(|v| to_process(v, n, Measurability::Full)).collect(),
        z0,
        zij,
        phi: to_process(phi, n, Measurability::Full),
        diagnostics,
    })
}

/// Per-node `|Σ_i α̂(Y^i, φ)|` (Euclidean norm over securities).
pub fn clearing_residual(solution: &EquilibriumSolution, model: &MarketModel, lattice: &ScenarioLattice) -> Result<AdaptedProcess> {
    let n = model.securities();
    solution.phi.check_on(lattice)?;
    for y in &solution.y {
        y.check_on(lattice)?;
    }
    let mut out = AdaptedProcess::zeros(lattice, 1, Measurability::Full);
    let mut sum = vec![0.0; n];
    for k in 0..=lattice.steps() {
        for node in 0..lattice.node_count(k) {
            sum.iter_mut().for_each(|s| *s = 0.0);
            let phi = solution.phi.at(k, node);
            for y in &solution.y {
                let r = model.optimal_rate(y.at(k, node), phi);
                for (s, v) in sum.iter_mut().zip(&r) {
                    *s += v;
                }
            }
            out.at_mut(k, node)[0] = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqoracle::discrete_riccati;
    use crate::model::{CoefficientBundle, InitialFamily, InitialLaw, LqParams};

    fn lq(gf: f64, gg: f64, gl: f64, n_agents: usize) -> MarketModel {
        let p = LqParams {
            sigma0: 0.3,
            sigma: 0.4,
            s0: 0.5,
            m0: 0.2,
            l0: 0.1,
            delta: 0.3,
            ..LqParams::new(gf, gg, gl, 1.5)
        };
        MarketModel::from_lq(&p, 1, 1, 1, n_agents, InitialFamily::TwoPoint).unwrap()
    }

    #[test]
    fn zero_model_is_zero() {
        let p = LqParams::new(0.0, 0.0, 0.0, 1.0);
        let m = MarketModel::from_lq(&p, 1, 1, 1, 2, InitialFamily::TwoPoint).unwrap();
        let l = m.lattice(2).unwrap();
        let s = solve_equilibrium(&m, &l, &SolverConfig::default()).unwrap();
        assert!(s.y.iter().all(|y| y.max_abs() == 0.0));
        assert!(s.x.iter().all(|x| x.max_abs() == 0.0));
        assert_eq!(s.phi.max_abs(), 0.0);
    }

    #[test]
    fn equilibrium_matches_discrete_riccati() {
        let m = lq(1.0, 1.0, 1.0, 2);
        let l = m.lattice(3).unwrap();
        let s = solve_equilibrium(&m, &l, &SolverConfig::default()).unwrap();
        let r = discrete_riccati(&LqParams::from_model(&m).unwrap(), 3).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..=3 {
            for node in 0..l.node_count(k) {
                let xbar = (s.x[0].at(k, node)[0] + s.x[1].at(k, node)[0]) / 2.0;
                for i in 0..2 {
                    let want = r.deviation[k] * (s.x[i].at(k, node)[0] - xbar) + r.mean[k] * xbar + r.offset[k];
                    worst = worst.max((s.y[i].at(k, node)[0] - want).abs());
                }
            }
        }
        assert!(worst < 1e-8, "{worst}");
        let res = clearing_residual(&s, &m, &l).unwrap();
        assert!(res.max_abs() <= 1e-12 * 2.0 * s.rate_scale(&m));
    }

    #[test]
    fn shifted_price_breaks_clearing() {
        let m = lq(1.0, 1.0, 1.0, 2);
        let l = m.lattice(2).unwrap();
        let mut s = solve_equilibrium(&m, &l, &SolverConfig::default()).unwrap();
        for k in 0..=2 {
            s.phi.step_mut(k).iter_mut().for_each(|v| *v += 1.0);
        }
        let res = clearing_residual(&s, &m, &l).unwrap();
        // Σ_i α̂ = −N Λ^{-1}·1 = −2/1.5
        for k in 0..=2 {
            for v in res.step(k) {
                assert!((v - 2.0 / 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_zero_model() {
        let p = LqParams::new(0.0, 0.0, 0.0, 1.0);
        let m = MarketModel::from_lq(&p, 1, 1, 1, 1, InitialFamily::TwoPoint).unwrap();
        let l = m.lattice(3).unwrap();
        let price = AdaptedProcess::zeros(&l, 1, Measurability::Full);
        let s = solve_decoupled(&m, &l, 0, &price, &SolverConfig::default()).unwrap();
        assert_eq!(s.y.max_abs(), 0.0);
        assert_eq!(s.x.max_abs(), 0.0);
        assert_eq!(s.z0.max_abs(), 0.0);
    }

    #[test]
    fn decoupled_rejects_wrong_price() {
        let m = lq(1.0, 1.0, 1.0, 1);
        let l = m.lattice(2).unwrap();
        let short = m.lattice(1).unwrap();
        let price = AdaptedProcess::zeros(&short, 1, Measurability::Full);
        assert!(matches!(
            solve_decoupled(&m, &l, 0, &price, &SolverConfig::default()),
            Err(Error::Adaptedness(_))
        ));
    }

    #[test]
    fn decoupled_backward_sweep_is_fixed_point() {
        let b = CoefficientBundle::lq(1.0, 1.0, 1.0).with_perturbation(0.3, 0.2, 0.1).with_vol(0.2, 0.3);
        let m = lq(1.0, 1.0, 1.0, 1).with_agents(vec![b]).unwrap();
        let l = m.lattice(3).unwrap();
        let price = AdaptedProcess::from_fn(&l, 1, Measurability::Full, |k, node, out| {
            out[0] = 0.1 + 0.2 * l.brownian_level(k, node, 0);
        });
        let cfg = SolverConfig::default();
        let s = solve_decoupled(&m, &l, 0, &price, &cfg).unwrap();
        let phi: Steps = (0..=3).map(|k| price.step(k).to_vec()).collect();
        let x: Steps = (0..=3).map(|k| s.x.step(k).to_vec()).collect();
        let engine = Engine {
            model: &m,
            lattice: &l,
            members: vec![Member {
                bundle: m.agent(0),
                lattice_agent: 0,
                x0: m.initial_law().lattice_positions(1)[0].clone(),
                weight: 1.0,
            }],
            coupling: Coupling::Exogenous(&phi),
            gamma: 1.0,
            aux: None,
        };
        let term = engine.terminal(&[x.clone()], &phi, 1.0).unwrap().remove(0);
        let y2 = engine.backward(0, &x, &phi, 1.0, term).unwrap();
        let diff = (0..=3).map(|k| crate::lattice::max_abs_diff(&y2[k], s.y.step(k))).fold(0.0, f64::max);
        assert!(diff <= 10.0 * cfg.tol, "{diff}");
    }

    #[test]
    fn uniqueness_from_two_guesses() {
        let b = CoefficientBundle::lq(1.0, 1.0, 1.0).with_perturbation(0.2, 0.1, 0.1).with_vol(0.3, 0.4);
        let m = lq(1.0, 1.0, 1.0, 2).with_agents(vec![b; 2]).unwrap();
        let m = m
            .with_initial_law(InitialLaw {
                family: InitialFamily::TwoPoint,
                mean: vec![0.1],
                scale: 0.4,
            })
            .unwrap();
        let l = m.lattice(2).unwrap();
        let a = solve_equilibrium(&m, &l, &SolverConfig::default()).unwrap();
        let cfg = SolverConfig {
            initial_price: Some(vec![1.0]),
            ..SolverConfig::default()
        };
        let b = solve_equilibrium(&m, &l, &cfg).unwrap();
        let diff = a.y.iter().zip(&b.y).map(|(u, v)| u.max_abs_diff(v)).fold(0.0, f64::max);
        assert!(diff <= 10.0 * 1e-10, "{diff}");
    }

    #[test]
    fn bad_schedule_is_config_error() {
        let m = lq(1.0, 1.0, 1.0, 1);
        let l = m.lattice(1).unwrap();
        let cfg = SolverConfig {
            schedule: vec![0.0, 0.7, 0.5, 1.0],
            ..Default::default()
        };
        assert!(matches!(solve_equilibrium(&m, &l, &cfg), Err(Error::Config(_))));
    }
}
