//! Global Newton solve of the full discrete N-agent system, used as an
//! oracle for the Picard solver on tiny lattices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lattice::ScenarioLattice;
use crate::model::{optimal_rate_into, MarketModel};

use super::engine::Steps;
use super::{assemble, Diagnostics, EquilibriumSolution, SolverConfig};

const TARGET: f64 = 1e-10;
const MAX_NEWTON: usize = 60;
const MAX_CONDITION: f64 = 1e14;

struct Layout<'a> {
    model: &'a MarketModel,
    lattice: &'a ScenarioLattice,
    n: usize,
    agents: usize,
    offsets: Vec<usize>,
    block: usize,
    x0: Vec<Vec<f64>>,
    shocks: Vec<Vec<f64>>,
}

impl<'a> Layout<'a> {
    fn new(model: &'a MarketModel, lattice: &'a ScenarioLattice) -> Self {
        let n = model.securities();
        let agents = model.agent_count();
        let mut offsets = Vec::with_capacity(lattice.steps() + 1);
        let mut acc = 0;
        for k in 0..=lattice.steps() {
            offsets.push(acc);
            acc += lattice.node_count(k) * n;
        }
        let shocks = (0..agents)
            .map(|i| {
                let b = model.agent(i);
                (0..lattice.branching())
                    .flat_map(|br| {
                        (0..n).map(move |row| {
                            let mut v = 0.0;
                            for j in 0..lattice.common_dim() {
                                v += b.vol0(row, j) * lattice.increment(br, lattice.common_coord(j));
                            }
                            for j in 0..lattice.idio_dim() {
                                v += b.vol(row, j) * lattice.increment(br, lattice.idio_coord(i, j));
                            }
                            v
                        })
                    })
                    .collect()
            })
            .collect();
        Self {
            model,
            lattice,
            n,
            agents,
            offsets,
            block: acc,
            x0: model.initial_law().lattice_positions(agents),
            shocks,
        }
    }

    fn unknowns(&self) -> usize {
        2 * self.agents * self.block
    }

    fn slice<'u>(&self, u: &'u [f64], agent: usize, adjoint: bool, k: usize) -> &'u [f64] {
        let base = (2 * agent + adjoint as usize) * self.block + self.offsets[k];
        &u[base..base + self.lattice.node_count(k) * self.n]
    }

    fn pack(&self, xs: &[Steps], ys: &[Steps]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.unknowns());
        for (x, y) in xs.iter().zip(ys) {
            u.extend(x.iter().flatten());
            u.extend(y.iter().flatten());
        }
        u
    }

    fn unpack(&self, u: &[f64]) -> (Vec<Steps>, Vec<Steps>) {
        let mut xs = Vec::with_capacity(self.agents);
        let mut ys = Vec::with_capacity(self.agents);
        for i in 0..self.agents {
            for (adjoint, out) in [(false, &mut xs), (true, &mut ys)] {
                out.push((0..=self.lattice.steps()).map(|k| self.slice(u, i, adjoint, k).to_vec()).collect());
            }
        }
        (xs, ys)
    }

    fn price(&self, u: &[f64], k: usize) -> Vec<f64> {
        let mut phi = vec![0.0; self.lattice.node_count(k) * self.n];
        for i in 0..self.agents {
            for (p, y) in phi.iter_mut().zip(self.slice(u, i, true, k)) {
                *p -= y;
            }
        }
        let inv = 1.0 / self.agents as f64;
        phi.iter_mut().for_each(|p| *p *= inv);
        phi
    }

    fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        let l = self.lattice;
        let n = self.n;
        let m = l.steps();
        let dt = l.dt();
        let delta = self.model.discount();
        let inv = self.model.fee_inverse();
        let phis: Vec<Vec<f64>> = (0..=m).map(|k| self.price(u, k)).collect();
        let mut out = vec![0.0; self.unknowns()];
        let mut c0 = vec![0.0; n];
        let mut ci = vec![0.0; n];
        let mut rate = vec![0.0; n];
        let mut flow = vec![0.0; n];
        let mut grad = vec![0.0; n];

        let leaves = l.node_count(m);
        let mut gs = vec![vec![0.0; leaves * n]; self.agents];
        for (i, g) in gs.iter_mut().enumerate() {
            let xm = self.slice(u, i, false, m);
            for node in 0..leaves {
                self.model.exo_common(l, m, node, &mut c0);
                self.model.exo_idio(l, i, m, node, &mut ci);
                self.model.agent(i).dgdx(&xm[node * n..(node + 1) * n], &c0, &ci, &mut g[node * n..(node + 1) * n]);
            }
        }
        let w = delta / (1.0 - delta) / self.agents as f64;
        let mut shift = vec![0.0; leaves * n];
        for g in &gs {
            for (s, v) in shift.iter_mut().zip(g) {
                *s += w * v;
            }
        }

        for i in 0..self.agents {
            let bundle = self.model.agent(i);
            let xb = 2 * i * self.block;
            let yb = xb + self.block;
            for c in 0..n {
                out[xb + c] = u[xb + c] - self.x0[i][c];
            }
            for k in 0..m {
                let t = l.time(k);
                let xk = self.slice(u, i, false, k);
                let yk = self.slice(u, i, true, k);
                let xn = self.slice(u, i, false, k + 1);
                for node in 0..l.node_count(k) {
                    let pv = &phis[k][node * n..(node + 1) * n];
                    self.model.exo_common(l, k, node, &mut c0);
                    self.model.exo_idio(l, i, k, node, &mut ci);
                    optimal_rate_into(inv, &yk[node * n..(node + 1) * n], pv, &mut rate);
                    bundle.flow(t, pv, &c0, &ci, &mut flow);
                    for child in l.children(node) {
                        let s = &self.shocks[i][l.branch(child) * n..(l.branch(child) + 1) * n];
                        for c in 0..n {
                            let pred = xk[node * n + c] + (rate[c] + flow[c]) * dt + s[c];
                            out[xb + self.offsets[k + 1] + child * n + c] = xn[child * n + c] - pred;
                        }
                    }
                }
                let yn = self.slice(u, i, true, k + 1);
                let mut v = yn.to_vec();
                for node in 0..l.node_count(k + 1) {
                    self.model.exo_common(l, k + 1, node, &mut c0);
                    self.model.exo_idio(l, i, k + 1, node, &mut ci);
                    bundle.dfdx(
                        l.time(k + 1),
                        &xn[node * n..(node + 1) * n],
                        &phis[k + 1][node * n..(node + 1) * n],
                        &c0,
                        &ci,
                        &mut grad,
                    );
                    for c in 0..n {
                        v[node * n + c] += dt * grad[c];
                    }
                }
                let e = l.cond_expect(k, &v, n)?;
                for (j, (y, ev)) in yk.iter().zip(&e).enumerate() {
                    out[yb + self.offsets[k] + j] = y - ev;
                }
            }
            let ym = self.slice(u, i, true, m);
            for j in 0..leaves * n {
                out[yb + self.offsets[m] + j] = ym[j] - (shift[j] + gs[i][j]);
            }
        }
        Ok(out)
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Max-norm residual of the discrete N-agent equilibrium system at a
/// candidate solution.
pub fn newton_residual(model: &MarketModel, lattice: &ScenarioLattice, solution: &EquilibriumSolution) -> Result<f64> {
    let layout = Layout::new(model, lattice);
    let xs: Vec<Steps> = solution.x.iter().map(|p| p.clone().into_steps()).collect();
    let ys: Vec<Steps> = solution.y.iter().map(|p| p.clone().into_steps()).collect();
    if xs.len() != layout.agents || ys.len() != layout.agents {
        return Err(Error::shape("solution agent count differs from the model"));
    }
    let u = layout.pack(&xs, &ys);
    if u.len() != layout.unknowns() {
        return Err(Error::shape("solution does not live on this lattice"));
    }
    Ok(norm_inf(&layout.residual(&u)?))
}

/// Newton's method on all node values of `X^i` and `Y^i` at once, with a
/// central-difference Jacobian and backtracking. Refuses instances above
/// `config.newton_size_cap` unknowns.
pub fn solve_global_newton(model: &MarketModel, lattice: &ScenarioLattice, config: &SolverConfig) -> Result<EquilibriumSolution> {
    if !config.newton_enabled {
        return Err(Error::Config("the Newton oracle is disabled in the solver config".into()));
    }
    model.check_lattice(lattice)?;
    if lattice.agents() != model.agent_count() {
        return Err(Error::shape("lattice agent count differs from the model"));
    }
    let layout = Layout::new(model, lattice);
    let size = layout.unknowns();
    if size > config.newton_size_cap {
        return Err(Error::Capacity {
            what: "newton unknowns",
            count: size as u128,
            limit: config.newton_size_cap as u128,
        });
    }
    let mut u = vec![0.0; size];
    let mut r = layout.residual(&u)?;
    let mut res = norm_inf(&r);
    let mut history = vec![res];
    let mut iterations = 0;
    while res > TARGET {
        if iterations >= MAX_NEWTON {
            return Err(Error::NonConvergence {
                iterations,
                last: res,
                history,
            });
        }
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(size, size);
        let mut probe = u.clone();
        for j in 0..size {
            let h = 1e-6 * (1.0 + u[j].abs());
            probe[j] = u[j] + h;
            let rp = layout.residual(&probe)?;
            probe[j] = u[j] - h;
            let rm = layout.residual(&probe)?;
            probe[j] = u[j];
            for (row, (a, b)) in rp.iter().zip(&rm).enumerate() {
                jac[(row, j)] = (a - b) / (2.0 * h);
            }
        }
        let lu = jac.lu();
        let diag: Vec<f64> = (0..size).map(|i| lu.u()[(i, i)].abs()).collect();
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diag.iter().cloned().fold(0.0, f64::max);
        if lo == 0.0 || hi / lo > MAX_CONDITION {
            return Err(Error::SingularJacobian {
                condition: if lo == 0.0 { f64::INFINITY } else { hi / lo },
            });
        }
        let step = lu
            .solve(&DVector::from_column_slice(&r))
            .ok_or(Error::SingularJacobian { condition: f64::INFINITY })?;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let rc = layout.residual(&cand)?;
            let nc = norm_inf(&rc);
            if nc < res || t < 1e-4 {
                u = cand;
                r = rc;
                res = nc;
                break;
            }
            t *= 0.5;
        }
        history.push(res);
        if !res.is_finite() {
            return Err(Error::NonConvergence {
                iterations,
                last: res,
                history,
            });
        }
    }
    let (xs, ys) = layout.unpack(&u);
    let phi: Steps = (0..=lattice.steps()).map(|k| layout.price(&u, k)).collect();
    assemble(
        model,
        lattice,
        xs,
        ys,
        phi,
        config.store_cross_z,
        Diagnostics {
            solver: "newton".into(),
            iterations,
            residual: res,
            history,
            stages: Vec::new(),
            cross_z_stored: config.store_cross_z,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::solve_equilibrium;
    use crate::model::{CoefficientBundle, InitialFamily, LqParams};

    fn model() -> MarketModel {
        let p = LqParams {
            sigma0: 0.3,
            sigma: 0.4,
            s0: 0.5,
            l0: 0.1,
            delta: 0.2,
            ..LqParams::new(1.0, 1.0, 1.0, 1.0)
        };
        let b = CoefficientBundle::lq(1.0, 1.0, 1.0).with_flow(0.1).with_vol(0.3, 0.4).with_perturbation(0.3, 0.2, 0.2);
        MarketModel::from_lq(&p, 1, 1, 1, 2, InitialFamily::TwoPoint)
            .unwrap()
            .with_agents(vec![b; 2])
            .unwrap()
    }

    #[test]
    fn newton_agrees_with_picard() {
        let m = model();
        let l = m.lattice(1).unwrap();
        let cfg = SolverConfig::default();
        let a = solve_global_newton(&m, &l, &cfg).unwrap();
        let b = solve_equilibrium(&m, &l, &cfg).unwrap();
        assert!(a.diagnostics.residual <= TARGET);
        for (u, v) in a.y.iter().zip(&b.y) {
            assert!(u.max_abs_diff(v) < 1e-8);
        }
        assert!(newton_residual(&m, &l, &b).unwrap() < 1e-9);
    }

    #[test]
    fn capacity_is_enforced() {
        let m = model();
        let l = m.lattice(2).unwrap();
        let cfg = SolverConfig {
            newton_size_cap: 10,
            ..Default::default()
        };
        assert!(matches!(solve_global_newton(&m, &l, &cfg), Err(Error::Capacity { .. })));
        let off = SolverConfig {
            newton_enabled: false,
            ..Default::default()
        };
        assert!(matches!(solve_global_newton(&m, &l, &off), Err(Error::Config(_))));
    }
}
