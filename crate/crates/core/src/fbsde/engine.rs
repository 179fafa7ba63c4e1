//! Forward/backward sweeps shared by the N-agent, single-agent and
//! mean-field solvers.
//!
//! For homotopy weight `ϱ` and member `i` the discrete system is
//!
//! ```text
//! X_{k+1} = X_k + (ϱ(α̂(Y_k, φ_k) + l_i(t_k, φ_k)) + I^b_k) dt + σ^0 ΔW^0 + σ ΔW^i
//! Y_k     = E[Y_{k+1} + ((1−ϱ)γ X_{k+1} + ϱ ∂f̄_i(t_{k+1}, X_{k+1}, φ_{k+1}) + I^f_{k+1}) dt | F_k]
//! Y_M     = ϱ(δ/(1−δ)·m_g + ∂ḡ_i(X_M)) + (1−ϱ) X_M + η
//! ```
//!
//! where `φ` and `m_g` come from the coupling: the population mean, the
//! common-noise conditional mean over atoms, or an exogenous price.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{max_abs_diff, AdaptedProcess, ScenarioLattice};
use crate::model::{optimal_rate_into, CoefficientBundle, MarketModel};

use super::{AuxInputs, SolverConfig, StageDiagnostics};

/// Node values for steps `0..=M`, flat `node·n + c` per step.
pub(crate) type Steps = Vec<Vec<f64>>;

pub(crate) struct Member<'a> {
    pub bundle: &'a CoefficientBundle,
    pub lattice_agent: usize,
    pub x0: Vec<f64>,
    pub weight: f64,
}

pub(crate) enum Coupling<'a> {
    /// `φ = −(1/N)Σ_i Y^i`, terminal mean over members.
    Mean,
    /// `φ = −Σ_a w_a E[Y^a | F̄^0]`, terminal conditional mean over atoms.
    CommonMean,
    /// Price given; terminal `−δφ_M + ∂ḡ`.
    Exogenous(&'a Steps),
}

pub(crate) struct Engine<'a> {
    pub model: &'a MarketModel,
    pub lattice: &'a ScenarioLattice,
    pub members: Vec<Member<'a>>,
    pub coupling: Coupling<'a>,
    /// `γ` of the homotopy's auxiliary monotone terms.
    pub gamma: f64,
    pub aux: Option<&'a AuxInputs>,
}

pub(crate) struct EngineOutput {
    pub xs: Vec<Steps>,
    pub ys: Vec<Steps>,
    pub phi: Steps,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub stages: Vec<StageDiagnostics>,
}

impl<'a> Engine<'a> {
    fn n(&self) -> usize {
        self.model.securities()
    }

    pub fn price(&self, ys: &[Steps]) -> Result<Steps> {
        let n = self.n();
        let l = self.lattice;
        match &self.coupling {
            Coupling::Exogenous(p) => Ok((*p).clone()),
            Coupling::Mean => {
                let inv = 1.0 / ys.len() as f64;
                Ok((0..=l.steps())
                    .map(|k| {
                        let mut out = vec![0.0; l.node_count(k) * n];
                        for y in ys {
                            for (o, v) in out.iter_mut().zip(&y[k]) {
                                *o += v;
                            }
                        }
                        out.iter_mut().for_each(|o| *o *= -inv);
                        out
                    })
                    .collect())
            }
            Coupling::CommonMean => (0..=l.steps())
                .map(|k| {
                    let mut out = vec![0.0; l.node_count(k) * n];
                    for (y, m) in ys.iter().zip(&self.members) {
                        let proj = l.cond_expect_common(k, &y[k], n)?;
                        for (o, v) in out.iter_mut().zip(&proj) {
                            *o -= m.weight * v;
                        }
                    }
                    Ok(out)
                })
                .collect(),
        }
    }

    pub fn forward(&self, idx: usize, y: &Steps, phi: &Steps, rho: f64) -> Steps {
        let l = self.lattice;
        let model = self.model;
        let n = self.n();
        let mem = &self.members[idx];
        let ib = self.aux.and_then(|a| a.forward.get(idx));
        let dt = l.dt();
        let d0 = l.common_dim();
        let d = l.idio_dim();
        let fee_inv = model.fee_inverse();
        let mut xs: Steps = Vec::with_capacity(l.steps() + 1);
        xs.push(mem.x0.clone());
        let mut c0 = vec![0.0; n];
        let mut ci = vec![0.0; n];
        let mut rate = vec![0.0; n];
        let mut flow = vec![0.0; n];
        let mut drift = vec![0.0; n];
        // noise loading per branch is the same for every parent
        let shocks: Vec<f64> = (0..l.branching())
            .flat_map(|br| {
                (0..n).map(move |row| {
                    let mut v = 0.0;
                    for j in 0..d0 {
                        v += mem.bundle.vol0(row, j) * l.increment(br, l.common_coord(j));
                    }
                    for j in 0..d {
                        v += mem.bundle.vol(row, j) * l.increment(br, l.idio_coord(mem.lattice_agent, j));
                    }
                    v
                })
            })
            .collect();
        for k in 0..l.steps() {
            let t = l.time(k);
            let xk = &xs[k];
            let mut next = vec![0.0; l.node_count(k + 1) * n];
            for node in 0..l.node_count(k) {
                let yv = &y[k][node * n..(node + 1) * n];
                let pv = &phi[k][node * n..(node + 1) * n];
                model.exo_common(l, k, node, &mut c0);
                model.exo_idio(l, mem.lattice_agent, k, node, &mut ci);
                optimal_rate_into(fee_inv, yv, pv, &mut rate);
                mem.bundle.flow(t, pv, &c0, &ci, &mut flow);
                for c in 0..n {
                    drift[c] = rho * (rate[c] + flow[c]);
                }
                if let Some(ib) = ib {
                    for (dr, v) in drift.iter_mut().zip(ib.at(k, node)) {
                        *dr += v;
                    }
                }
                let xp = &xk[node * n..(node + 1) * n];
                for child in l.children(node) {
                    let br = l.branch(child);
                    let s = &shocks[br * n..(br + 1) * n];
                    let out = &mut next[child * n..(child + 1) * n];
                    for c in 0..n {
                        out[c] = xp[c] + drift[c] * dt + s[c];
                    }
                }
            }
            xs.push(next);
        }
        xs
    }

    /// Per-member terminal values `Y_M`.
    pub fn terminal(&self, xs: &[Steps], phi: &Steps, rho: f64) -> Result<Vec<Vec<f64>>> {
        let l = self.lattice;
        let m = l.steps();
        let n = self.n();
        let leaves = l.node_count(m);
        let delta = self.model.discount();
        let mut c0 = vec![0.0; n];
        let mut ci = vec![0.0; n];
        let gs: Vec<Vec<f64>> = self
            .members
            .iter()
            .zip(xs)
            .map(|(mem, x)| {
                let mut g = vec![0.0; leaves * n];
                for node in 0..leaves {
                    self.model.exo_common(l, m, node, &mut c0);
                    self.model.exo_idio(l, mem.lattice_agent, m, node, &mut ci);
                    mem.bundle
                        .dgdx(&x[m][node * n..(node + 1) * n], &c0, &ci, &mut g[node * n..(node + 1) * n]);
                }
                g
            })
            .collect();
        let shift: Vec<f64> = match &self.coupling {
            Coupling::Exogenous(_) => phi[m].iter().map(|p| -delta * p).collect(),
            Coupling::Mean => {
                let w = delta / (1.0 - delta) / gs.len() as f64;
                let mut s = vec![0.0; leaves * n];
                for g in &gs {
                    for (o, v) in s.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                s.iter_mut().for_each(|o| *o *= w);
                s
            }
            Coupling::CommonMean => {
                let w = delta / (1.0 - delta);
                let mut s = vec![0.0; leaves * n];
                for (g, mem) in gs.iter().zip(&self.members) {
                    let proj = l.cond_expect_common(m, g, n)?;
                    for (o, v) in s.iter_mut().zip(&proj) {
                        *o += w * mem.weight * v;
                    }
                }
                s
            }
        };
        Ok(gs
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let eta = self.aux.and_then(|a| a.terminal.get(i));
                g.iter()
                    .zip(&shift)
                    .zip(&xs[i][m])
                    .enumerate()
                    .map(|(j, ((gv, sv), xv))| {
                        let e = eta.map_or(0.0, |e| e[j]);
                        rho * (sv + gv) + (1.0 - rho) * xv + e
                    })
                    .collect()
            })
            .collect())
    }

    pub fn backward(&self, idx: usize, x: &Steps, phi: &Steps, rho: f64, terminal: Vec<f64>) -> Result<Steps> {
        let l = self.lattice;
        let n = self.n();
        let mem = &self.members[idx];
        let ifd = self.aux.and_then(|a| a.driver.get(idx));
        let dt = l.dt();
        let m = l.steps();
        let mut ys: Steps = vec![Vec::new(); m + 1];
        ys[m] = terminal;
        let mut c0 = vec![0.0; n];
        let mut ci = vec![0.0; n];
        let mut grad = vec![0.0; n];
        for k in (0..m).rev() {
            let t1 = l.time(k + 1);
            let mut v = ys[k + 1].clone();
            for node in 0..l.node_count(k + 1) {
                let xv = &x[k + 1][node * n..(node + 1) * n];
                let pv = &phi[k + 1][node * n..(node + 1) * n];
                self.model.exo_common(l, k + 1, node, &mut c0);
                self.model.exo_idio(l, mem.lattice_agent, k + 1, node, &mut ci);
                mem.bundle.dfdx(t1, xv, pv, &c0, &ci, &mut grad);
                let slot = &mut v[node * n..(node + 1) * n];
                for c in 0..n {
                    slot[c] += dt * ((1.0 - rho) * self.gamma * xv[c] + rho * grad[c]);
                }
                if let Some(f) = ifd {
                    for (s, a) in slot.iter_mut().zip(f.at(k + 1, node)) {
                        *s += dt * a;
                    }
                }
            }
            ys[k] = l.cond_expect(k, &v, n)?;
        }
        Ok(ys)
    }

    /// Damped Picard iteration over the continuation schedule, starting
    /// from `ys`.
    pub fn run(&self, config: &SolverConfig, mut ys: Vec<Steps>) -> Result<EngineOutput> {
        let mut history = Vec::new();
        let mut stages = Vec::new();
        let mut iterations = 0usize;
        let mut last_res = 0.0;
        let schedule = config.schedule_checked()?;
        let count = schedule.len();
        for (si, &rho) in schedule.iter().enumerate() {
            let stage_tol = if si + 1 == count { config.tol } else { config.tol.max(1e-6) };
            let mut theta = config.damping;
            let mut prev = f64::INFINITY;
            let mut stage_iters = 0usize;
            loop {
                let phi = self.price(&ys)?;
                let xs: Vec<Steps> = (0..self.members.len())
                    .into_par_iter()
                    .map(|i| self.forward(i, &ys[i], &phi, rho))
                    .collect();
                let term = self.terminal(&xs, &phi, rho)?;
                let new: Vec<Steps> = term
                    .into_par_iter()
                    .enumerate()
                    .map(|(i, t)| self.backward(i, &xs[i], &phi, rho, t))
                    .collect::<Result<_>>()?;
                let res = ys
                    .iter()
                    .zip(&new)
                    .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| max_abs_diff(u, v)))
                    .fold(0.0, f64::max);
                history.push(res);
                iterations += 1;
                stage_iters += 1;
                last_res = res;
                if !res.is_finite() {
                    return Err(Error::NonConvergence {
                        iterations,
                        last: res,
                        history,
                    });
                }
                if res <= stage_tol {
                    ys = new;
                    break;
                }
                if iterations >= config.max_iters {
                    return Err(Error::NonConvergence {
                        iterations,
                        last: res,
                        history,
                    });
                }
                if res > prev {
                    theta = (theta * 0.5).max(1.0 / 1024.0);
                }
                prev = res;
                for (a, b) in ys.iter_mut().zip(&new) {
                    for (u, v) in a.iter_mut().zip(b) {
                        for (p, q) in u.iter_mut().zip(v) {
                            *p += theta * (q - *p);
                        }
                    }
                }
            }
            stages.push(StageDiagnostics {
                rho,
                iterations: stage_iters,
                residual: last_res,
                damping: theta,
            });
        }
        let phi = self.price(&ys)?;
        let xs: Vec<Steps> = (0..self.members.len())
            .into_par_iter()
            .map(|i| self.forward(i, &ys[i], &phi, 1.0))
            .collect();
        Ok(EngineOutput {
            xs,
            ys,
            phi,
            iterations,
            residual: last_res,
            history,
            stages,
        })
    }
}

pub(crate) fn to_process(values: Steps, n: usize, tag: crate::lattice::Measurability) -> AdaptedProcess {
    AdaptedProcess::from_steps(n, tag, values)
}

/// Splits `martingale_coefficients` of `y` into the common block and the
/// idiosyncratic blocks. With `blocks = None` all agents' blocks are kept.
pub(crate) fn martingale_blocks(
    lattice: &ScenarioLattice,
    y: &Steps,
    n: usize,
    own: usize,
    all_blocks: bool,
) -> Result<(Steps, Steps)> {
    let nd = lattice.noise_dim();
    let d0 = lattice.common_dim();
    let d = lattice.idio_dim();
    let mut z0 = Vec::with_capacity(lattice.steps());
    let mut zi = Vec::with_capacity(lattice.steps());
    for k in 0..lattice.steps() {
        let z = lattice.martingale_coefficients(k, &y[k + 1], n)?;
        let nodes = lattice.node_count(k);
        let wi = if all_blocks { lattice.agents() * d } else { d };
        let mut a = Vec::with_capacity(nodes * n * d0);
        let mut b = Vec::with_capacity(nodes * n * wi);
        for node in 0..nodes {
            for c in 0..n {
                let row = &z[(node * n + c) * nd..(node * n + c + 1) * nd];
                a.extend_from_slice(&row[..d0]);
                if all_blocks {
                    b.extend_from_slice(&row[d0..]);
                } else {
                    let s = d0 + own * d;
                    b.extend_from_slice(&row[s..s + d]);
                }
            }
        }
        z0.push(a);
        zi.push(b);
    }
    Ok((z0, zi))
}
