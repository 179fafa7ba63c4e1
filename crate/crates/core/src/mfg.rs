//! Mean-field limit: the conditional McKean-Vlasov system on a
//! representative-agent lattice, and the clearing error of its price in
//! finite populations.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbsde::engine::{martingale_blocks, to_process, Coupling, Engine, Member, Steps};
use crate::fbsde::{solve_decoupled, Diagnostics, SolverConfig};
use crate::lattice::{AdaptedProcess, Measurability, ScenarioLattice};
use crate::lqoracle::discrete_riccati;
use crate::model::{InitialFamily, LqParams, MarketModel};

/// Quantile atoms used for a Gaussian initial law.
pub const GAUSSIAN_ATOMS: usize = 8;

/// Representative-agent solution. The initial law is carried by atoms:
/// entry `a` of `x`, `y`, `z0`, `zi` is the representative started at
/// `atoms[a]`, and conditional expectations given the common noise average
/// over idiosyncratic branches and atoms with `weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct MkvSolution {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub x: Vec<AdaptedProcess>,
    pub y: Vec<AdaptedProcess>,
    pub z0: Vec<AdaptedProcess>,
    pub zi: Vec<AdaptedProcess>,
    /// `E[Ȳ | F̄^0]`, common-tagged.
    pub m: AdaptedProcess,
    /// `−m`, common-tagged.
    pub phi_mfg: AdaptedProcess,
    /// `φ^MFG` per common-noise prefix: step `k` holds
    /// `common_groups(k)·n` values.
    pub phi_groups: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl MkvSolution {
    pub fn steps(&self) -> usize {
        self.phi_groups.len() - 1
    }

    pub fn securities(&self) -> usize {
        self.m.dim()
    }

    /// `φ^MFG` carried to another lattice with the same common noise grid.
    pub fn price_on(&self, lattice: &ScenarioLattice) -> Result<AdaptedProcess> {
        let n = self.securities();
        if lattice.steps() != self.steps() {
            return Err(Error::shape(format!(
                "mean-field price has {} steps, lattice has {}",
                self.steps(),
                lattice.steps()
            )));
        }
        for (k, g) in self.phi_groups.iter().enumerate() {
            if g.len() != lattice.common_groups(k) * n {
                return Err(Error::shape("common noise dimension differs from the mean-field lattice"));
            }
        }
        let values = (0..=lattice.steps())
            .map(|k| {
                let groups = &self.phi_groups[k];
                (0..lattice.node_count(k))
                    .flat_map(|node| {
                        let g = lattice.common_index(k, node);
                        groups[g * n..(g + 1) * n].iter().copied()
                    })
                    .collect()
            })
            .collect();
        Ok(AdaptedProcess::from_steps(n, Measurability::Common, values))
    }

    /// Rows `(step, group, coordinate, value)` of `φ^MFG`.
    pub fn write_price_csv(&self, path: &Path) -> Result<()> {
        let n = self.securities();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,group,coordinate,value")?;
        for (k, g) in self.phi_groups.iter().enumerate() {
            for (j, v) in g.iter().enumerate() {
                writeln!(out, "{k},{},{},{v:?}", j / n, j % n)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Solves the conditional McKean-Vlasov system for a homogeneous model on
/// a lattice with a single idiosyncratic block.
pub fn solve_mkv(model: &MarketModel, lattice: &ScenarioLattice, config: &SolverConfig) -> Result<MkvSolution> {
    if !model.is_homogeneous() {
        return Err(Error::invalid("the mean-field limit needs identical agents"));
    }
    model.check_lattice(lattice)?;
    if lattice.agents() != 1 {
        return Err(Error::shape("the mean-field solve runs on a one-agent lattice"));
    }
    if config.aux.is_some() {
        return Err(Error::Config("auxiliary inputs are not supported for the mean-field system".into()));
    }
    let n = model.securities();
    let (atoms, weights) = model.initial_law().atoms(GAUSSIAN_ATOMS);
    let members = atoms
        .iter()
        .zip(&weights)
        .map(|(a, &w)| Member {
            bundle: model.agent(0),
            lattice_agent: 0,
            x0: a.clone(),
            weight: w,
        })
        .collect();
    let gamma = model.agent(0).gamma_compat();
    let engine = Engine {
        model,
        lattice,
        members,
        coupling: Coupling::CommonMean,
        gamma: if gamma > 0.0 { gamma } else { 1.0 },
        aux: None,
    };
    let init: Vec<Steps> = vec![
        (0..=lattice.steps())
            .map(|k| {
                let p = config.initial_price.clone().unwrap_or_else(|| vec![0.0; n]);
                p.iter().map(|v| -v).cycle().take(lattice.node_count(k) * n).collect()
            })
            .collect();
        atoms.len()
    ];
    let out = engine.run(config, init)?;
    let m: Steps = out.phi.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
    let phi_groups = (0..=lattice.steps())
        .map(|k| {
            let mut g = vec![0.0; lattice.common_groups(k) * n];
            // first node of each group carries its value
            let mut seen = vec![false; lattice.common_groups(k)];
            for node in 0..lattice.node_count(k) {
                let gi = lattice.common_index(k, node);
                if !seen[gi] {
                    seen[gi] = true;
                    g[gi * n..(gi + 1) * n].copy_from_slice(&out.phi[k][node * n..(node + 1) * n]);
                }
            }
            g
        })
        .collect();
    let mut z0 = Vec::new();
    let mut zi = Vec::new();
    for y in &out.ys {
        let (a, b) = martingale_blocks(lattice, y, n, 0, false)?;
        z0.push(AdaptedProcess::from_steps(n * lattice.common_dim(), Measurability::Full, a));
        zi.push(AdaptedProcess::from_steps(n * lattice.idio_dim(), Measurability::Full, b));
    }
    Ok(MkvSolution {
        atoms,
        weights,
        x: out.xs.into_iter().map(|v| to_process(v, n, Measurability::Full)).collect(),
        y: out.ys.into_iter().map(|v| to_process(v, n, Measurability::Full)).collect(),
        z0,
        zi,
        m: to_process(m, n, Measurability::Common),
        phi_mfg: to_process(out.phi, n, Measurability::Common),
        phi_groups,
        diagnostics: Diagnostics {
            solver: "mkv".into(),
            iterations: out.iterations,
            residual: out.residual,
            history: out.history,
            stages: out.stages,
            cross_z_stored: false,
        },
    })
}

/// Per-node per-capita clearing error and its time profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClearingResidual {
    pub agents: usize,
    /// `(1/N)|Σ_i α̂^i|` per node.
    #[serde(skip)]
    pub per_node: AdaptedProcess,
    /// `E[r_k²]` per step.
    pub mean_square: Vec<f64>,
    /// `sqrt(mean_k E[r_k²])`.
    pub l2: f64,
}

fn l2_of(mean_square: &[f64]) -> f64 {
    (mean_square.iter().sum::<f64>() / mean_square.len() as f64).sqrt()
}

/// Plugs `φ^MFG` into every agent's best response on an N-agent lattice
/// and measures the aggregate trading rate.
pub fn mfg_clearing_residual(
    mkv: &MkvSolution,
    model: &MarketModel,
    lattice: &ScenarioLattice,
    config: &SolverConfig,
) -> Result<ClearingResidual> {
    model.check_lattice(lattice)?;
    if !model.is_homogeneous() || lattice.agents() != model.agent_count() {
        return Err(Error::shape("lattice must host the model's identical agents"));
    }
    if mkv.securities() != model.securities() {
        return Err(Error::shape("mean-field solution has a different security count"));
    }
    let price = mkv.price_on(lattice)?;
    let nag = model.agent_count();
    let n = model.securities();
    let single = SolverConfig {
        schedule: vec![1.0],
        aux: None,
        ..config.clone()
    };
    let ys = (0..nag)
        .map(|i| solve_decoupled(model, lattice, i, &price, &single).map(|s| s.y))
        .collect::<Result<Vec<_>>>()?;
    let mut per_node = AdaptedProcess::zeros(lattice, 1, Measurability::Full);
    let mut mean_square = Vec::with_capacity(lattice.steps() + 1);
    let mut sum = vec![0.0; n];
    for k in 0..=lattice.steps() {
        let mut sq = Vec::with_capacity(lattice.node_count(k));
        for node in 0..lattice.node_count(k) {
            sum.iter_mut().for_each(|s| *s = 0.0);
            let phi = price.at(k, node);
            for y in &ys {
                for (s, v) in sum.iter_mut().zip(model.optimal_rate(y.at(k, node), phi)) {
                    *s += v;
                }
            }
            let r2 = sum.iter().map(|v| v * v).sum::<f64>() / (nag * nag) as f64;
            per_node.at_mut(k, node)[0] = r2.sqrt();
            sq.push(r2);
        }
        mean_square.push(lattice.mean_scalar(k, &sq));
    }
    Ok(ClearingResidual {
        agents: nag,
        l2: l2_of(&mean_square),
        per_node,
        mean_square,
    })
}

/// Exact `E[r_k²]` of the same discrete scheme for an LQ model with
/// `Λ = λI`: the per-capita rate is `−(p_k/λ)` times the mean deviation,
/// which starts at the lattice positions' mean offset and picks up the
/// averaged idiosyncratic noise.
pub fn lq_clearing_residual(
    params: &LqParams,
    securities: usize,
    agents: usize,
    steps: usize,
    family: InitialFamily,
) -> Result<ClearingResidual> {
    if agents == 0 {
        return Err(Error::invalid("need at least one agent"));
    }
    let r = discrete_riccati(params, steps)?;
    let dt = params.horizon / steps as f64;
    let law = crate::model::InitialLaw {
        family,
        mean: vec![params.m0],
        scale: params.s0,
    };
    let pos = law.lattice_positions(agents);
    let offset = pos.iter().map(|p| p[0] - params.m0).sum::<f64>() / agents as f64;
    let noise = params.sigma * params.sigma * dt / agents as f64;
    let mut mean = offset;
    let mut var = 0.0;
    let mut mean_square = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let g = r.deviation[k] / params.lambda;
        mean_square.push(securities as f64 * g * g * (mean * mean + var));
        if k < steps {
            let a = 1.0 - dt * g;
            mean *= a;
            var = a * a * var + noise;
        }
    }
    let lattice = ScenarioLattice::new(1, 1, 0, 0, params.horizon)?;
    Ok(ClearingResidual {
        agents,
        l2: l2_of(&mean_square),
        per_node: AdaptedProcess::zeros(&lattice, 1, Measurability::Full),
        mean_square,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::max_abs_diff;
    use crate::model::{CoefficientBundle, InitialLaw};

    fn params() -> LqParams {
        LqParams {
            sigma0: 0.3,
            sigma: 0.4,
            s0: 0.5,
            m0: 0.2,
            l0: 0.1,
            delta: 0.3,
            ..LqParams::new(1.0, 1.0, 1.0, 1.5)
        }
    }

    fn rep(p: &LqParams) -> MarketModel {
        MarketModel::from_lq(p, 1, 1, 1, 1, InitialFamily::TwoPoint).unwrap()
    }

    #[test]
    fn zero_model_has_zero_price() {
        let p = LqParams::new(0.0, 0.0, 0.0, 1.0);
        let m = rep(&p);
        let l = m.representative_lattice(3).unwrap();
        let s = solve_mkv(&m, &l, &SolverConfig::default()).unwrap();
        assert_eq!(s.m.max_abs(), 0.0);
        assert_eq!(s.phi_mfg.max_abs(), 0.0);
    }

    #[test]
    fn heterogeneous_rejected() {
        let m = MarketModel::from_lq(&params(), 1, 1, 1, 2, InitialFamily::TwoPoint)
            .unwrap()
            .with_agents(vec![CoefficientBundle::lq(1.0, 1.0, 1.0), CoefficientBundle::lq(2.0, 1.0, 1.0)])
            .unwrap();
        let l = m.representative_lattice(1).unwrap();
        assert!(solve_mkv(&m, &l, &SolverConfig::default()).is_err());
    }

    #[test]
    fn fixed_point_and_riccati_mean() {
        let p = params();
        let m = rep(&p);
        let l = m.representative_lattice(3).unwrap();
        let s = solve_mkv(&m, &l, &SolverConfig::default()).unwrap();
        s.m.check_on(&l).unwrap();
        let r = discrete_riccati(&p, 3).unwrap();
        for k in 0..=3 {
            let mut ybar = vec![0.0; l.node_count(k)];
            let mut xbar = vec![0.0; l.node_count(k)];
            for a in 0..s.atoms.len() {
                for (o, v) in ybar.iter_mut().zip(s.y[a].step(k)) {
                    *o += s.weights[a] * v;
                }
                for (o, v) in xbar.iter_mut().zip(s.x[a].step(k)) {
                    *o += s.weights[a] * v;
                }
            }
            let proj = l.cond_expect_common(k, &ybar, 1).unwrap();
            assert!(max_abs_diff(&proj, s.m.step(k)) <= 1e-9);
            let xc = l.cond_expect_common(k, &xbar, 1).unwrap();
            for node in 0..l.node_count(k) {
                let want = r.mean[k] * xc[node] + r.offset[k];
                assert!((s.m.at(k, node)[0] - want).abs() < 1e-8);
                // conditional law of Ȳ: Ȳ − m = p (X̄ − E[X̄|F̄^0])
                for a in 0..s.atoms.len() {
                    let dev = s.y[a].at(k, node)[0] - s.m.at(k, node)[0];
                    assert!((dev - r.deviation[k] * (s.x[a].at(k, node)[0] - xc[node])).abs() < 1e-8);
                }
            }
            // tower identity
            let e_phi = l.expectation(k, s.phi_mfg.step(k), 1).unwrap()[0];
            let e_y = l.expectation(k, &ybar, 1).unwrap()[0];
            assert!((e_phi + e_y).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_price_without_common_noise() {
        let p = LqParams { sigma0: 0.0, ..params() };
        let m = rep(&p);
        let l = m.representative_lattice(4).unwrap();
        let s = solve_mkv(&m, &l, &SolverConfig::default()).unwrap();
        for k in 0..=4 {
            let v = s.phi_mfg.step(k);
            assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn no_idiosyncratic_randomness_clears_exactly() {
        let p = LqParams { sigma: 0.0, s0: 0.0, ..params() };
        let m = rep(&p);
        let s = solve_mkv(&m, &m.representative_lattice(2).unwrap(), &SolverConfig::default()).unwrap();
        let mn = m.with_agent_count(3).unwrap();
        let ln = mn.lattice(2).unwrap();
        let r = mfg_clearing_residual(&s, &mn, &ln, &SolverConfig::default()).unwrap();
        assert!(r.per_node.max_abs() < 1e-9);
    }

    #[test]
    fn single_agent_residual_is_own_rate() {
        let p = params();
        let m = rep(&p);
        let l = m.representative_lattice(2).unwrap();
        let s = solve_mkv(&m, &l, &SolverConfig::default()).unwrap();
        let r = mfg_clearing_residual(&s, &m, &l, &SolverConfig::default()).unwrap();
        // agent 0 sits at the first atom
        for k in 0..=2 {
            for node in 0..l.node_count(k) {
                let want = (s.y[0].at(k, node)[0] - s.m.at(k, node)[0]).abs() / p.lambda;
                assert!((r.per_node.at(k, node)[0] - want).abs() < 1e-9);
            }
        }
        assert!(r.l2 > 0.0);
    }

    #[test]
    fn lattice_residual_matches_discrete_formula() {
        let p = params();
        let m = rep(&p);
        let s = solve_mkv(&m, &m.representative_lattice(2).unwrap(), &SolverConfig::default()).unwrap();
        for nag in [2, 3] {
            let mn = m.with_agent_count(nag).unwrap();
            let r = mfg_clearing_residual(&s, &mn, &mn.lattice(2).unwrap(), &SolverConfig::default()).unwrap();
            let f = lq_clearing_residual(&p, 1, nag, 2, InitialFamily::TwoPoint).unwrap();
            for (a, b) in r.mean_square.iter().zip(&f.mean_square) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b), "{a} {b}");
            }
        }
    }

    #[test]
    fn gaussian_law_uses_quantile_atoms() {
        let m = rep(&params())
            .with_initial_law(InitialLaw {
                family: InitialFamily::Gaussian,
                mean: vec![0.0],
                scale: 0.5,
            })
            .unwrap();
        let s = solve_mkv(&m, &m.representative_lattice(1).unwrap(), &SolverConfig::default()).unwrap();
        assert_eq!(s.atoms.len(), GAUSSIAN_ATOMS);
    }

    #[test]
    fn price_csv_has_one_row_per_group() {
        let m = rep(&params());
        let s = solve_mkv(&m, &m.representative_lattice(2).unwrap(), &SolverConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.csv");
        s.write_price_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 1 + 2 + 4);
    }
}
