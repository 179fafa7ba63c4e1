//! Wasserstein-2 distances, the empirical-measure rate `ε_N`, log-log
//! rate fits, and evaluators for the stability estimates.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fbsde::EquilibriumSolution;
use crate::lattice::{AdaptedProcess, ScenarioLattice};
use crate::lqoracle::{continuous_riccati, deviation_variance, mean_stderr};
use crate::model::{InitialFamily, LqParams, MarketModel};

/// Largest atom count accepted by [`w2_empirical_assignment`].
pub const ASSIGNMENT_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        let weights = vec![w; points.len()];
        Self::new(points, weights)
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::uniform(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::shape("measure needs as many weights as points, at least one"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::shape("atoms must be finite and share one dimension"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("weights must be nonnegative and sum to 1, got sum {total}")));
        }
        Ok(Self { points, weights })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, w) in self.points.iter().zip(&self.weights) {
            for (a, b) in m.iter_mut().zip(p) {
                *a += w * b;
            }
        }
        m
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|v| (v - w).abs() <= 1e-15)
    }

    fn sorted_scalars(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.points.iter().map(|p| p[0]).zip(self.weights.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

fn check_pair(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("atom counts differ: {} vs {}", a.len(), b.len())));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape("measures live in different dimensions"));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(Error::Domain("equal-size W2 needs uniform weights".into()));
    }
    Ok(())
}

/// `W2` between two uniform one-dimensional samples of equal size, by
/// matching order statistics.
pub fn w2_empirical_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_pair(a, b)?;
    if a.dim() != 1 {
        return Err(Error::shape("w2_empirical_1d needs scalar atoms"));
    }
    let x = a.sorted_scalars();
    let y = b.sorted_scalars();
    let s: f64 = x.iter().zip(&y).map(|(u, v)| (u.0 - v.0).powi(2)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// `W2` between two weighted one-dimensional discrete laws, by merging
/// their quantile functions.
pub fn w2_discrete_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::shape("w2_discrete_1d needs scalar atoms"));
    }
    let x = a.sorted_scalars();
    let y = b.sorted_scalars();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (x[0].1, y[0].1);
    let mut total = 0.0;
    loop {
        let w = ra.min(rb);
        total += w * (x[i].0 - y[j].0).powi(2);
        ra -= w;
        rb -= w;
        if ra <= 1e-15 {
            i += 1;
            if i == x.len() {
                break;
            }
            ra += x[i].1;
        }
        if rb <= 1e-15 {
            j += 1;
            if j == y.len() {
                break;
            }
            rb += y[j].1;
        }
    }
    Ok(total.max(0.0).sqrt())
}

/// Minimum-cost assignment for a square cost matrix (rows `n`, flat).
/// Returns the column assigned to each row.
pub(crate) fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials formulation, 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Exact `W2` between two uniform samples of equal size in any dimension,
/// by optimal assignment.
pub fn w2_empirical_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len();
    if n > ASSIGNMENT_CAP {
        return Err(Error::Capacity {
            what: "assignment atoms",
            count: n as u128,
            limit: ASSIGNMENT_CAP as u128,
        });
    }
    let cost: Vec<f64> = a
        .points
        .iter()
        .flat_map(|p| b.points.iter().map(move |q| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>()))
        .collect();
    let assign = hungarian(&cost, n);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// `∫ z φ(z)` and `∫ z² φ(z)` over `[z0, z1]`.
fn normal_moments(z0: f64, z1: f64) -> (f64, f64) {
    let std = Normal::standard();
    let pdf = |z: f64| if z.is_finite() { std.pdf(z) } else { 0.0 };
    let zpdf = |z: f64| if z.is_finite() { z * std.pdf(z) } else { 0.0 };
    let cdf = |z: f64| std.cdf(z);
    let m1 = pdf(z0) - pdf(z1);
    let m2 = (cdf(z1) - cdf(z0)) - (zpdf(z1) - zpdf(z0));
    (m1, m2)
}

fn quantile(u: f64) -> f64 {
    if u <= 0.0 {
        f64::NEG_INFINITY
    } else if u >= 1.0 {
        f64::INFINITY
    } else {
        Normal::standard().inverse_cdf(u)
    }
}

/// Per-cell first and second standard-normal moments for `count` equal
/// quantile cells.
fn uniform_cells(count: usize) -> Vec<(f64, f64)> {
    let z: Vec<f64> = (0..=count).map(|i| quantile(i as f64 / count as f64)).collect();
    z.windows(2).map(|w| normal_moments(w[0], w[1])).collect()
}

/// `W2` between a weighted scalar sample and `N(mean, sd²)`:
/// `∫₀¹ (F_a^{-1}(u) − mean − sd Φ^{-1}(u))² du`, integrated in closed form
/// over each constant piece of the empirical quantile.
pub fn w2_empirical_vs_gaussian_1d(a: &EmpiricalMeasure, mean: f64, sd: f64) -> Result<f64> {
    if a.dim() != 1 {
        return Err(Error::shape("w2_empirical_vs_gaussian_1d needs scalar atoms"));
    }
    if !(sd >= 0.0) {
        return Err(Error::Domain(format!("standard deviation must be nonnegative, got {sd}")));
    }
    let x = a.sorted_scalars();
    let mut acc = 0.0;
    let mut cum = 0.0;
    let mut z0 = f64::NEG_INFINITY;
    for (i, (v, w)) in x.iter().enumerate() {
        let next = if i + 1 == x.len() { 1.0 } else { cum + w };
        let z1 = quantile(next);
        let c = v - mean;
        let (m1, m2) = normal_moments(z0, z1);
        acc += c * c * w - 2.0 * c * sd * m1 + sd * sd * m2;
        cum = next;
        z0 = z1;
    }
    Ok(acc.max(0.0).sqrt())
}

/// Proxy for `W2(a, N(mean, sd²I))` with vector atoms: the Gaussian is
/// replaced by a seeded sample of the same size and matched by assignment.
/// The sample's own distance to the Gaussian biases the value upward.
pub fn w2_empirical_vs_gaussian_proxy(a: &EmpiricalMeasure, mean: &[f64], sd: f64, seed: u64) -> Result<f64> {
    if mean.len() != a.dim() {
        return Err(Error::shape("mean has the wrong dimension"));
    }
    if !(sd >= 0.0) {
        return Err(Error::Domain(format!("standard deviation must be nonnegative, got {sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..a.len())
        .map(|_| {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + sd * z
                })
                .collect()
        })
        .collect();
    w2_empirical_assignment(a, &EmpiricalMeasure::uniform(points)?)
}

/// `N^{−2/max(n,4)}`, times `1 + ln N` in dimension 4.
pub fn epsilon_n(n: usize, agents: usize) -> Result<f64> {
    if n == 0 || agents < 2 {
        return Err(Error::Domain("epsilon_n needs n ≥ 1 and N ≥ 2".into()));
    }
    let nn = agents as f64;
    let base = nn.powf(-2.0 / n.max(4) as f64);
    Ok(if n == 4 { base * (1.0 + nn.ln()) } else { base })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Least-squares line through `(ln N, ln value)`.
pub fn fit_loglog_slope(pairs: &[(f64, f64)]) -> Result<LogLogFit> {
    if pairs.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 points, got {}", pairs.len())));
    }
    if let Some(p) = pairs.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(Error::Domain(format!("log-log fit needs positive values, got {p:?}")));
    }
    let pts: Vec<(f64, f64)> = pairs.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / k).sqrt();
    Ok(LogLogFit {
        slope,
        intercept,
        residual,
    })
}

/// Coefficient differences between two models evaluated along one
/// solution, per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceTerms {
    /// `|Δξ^i|²`.
    pub initial: Vec<f64>,
    /// Terminal difference at the leaves, `n` values per leaf.
    pub terminal: Vec<Vec<f64>>,
    /// Driver difference, steps `0..=M` (steps `1..=M` enter the integral).
    pub driver: Vec<AdaptedProcess>,
    /// Drift difference, steps `0..=M` (steps `0..M` enter the integral).
    pub drift: Vec<AdaptedProcess>,
    /// Squared Frobenius norms of the volatility differences.
    pub vol0: Vec<f64>,
    pub vol: Vec<f64>,
}

impl DifferenceTerms {
    /// `E[|Δξ|² + |Ḡ|² + ∫(|F̄|² + |B̄|² + |σ̄⁰|² + |σ̄|²)dt]` of one agent.
    pub fn agent_total(&self, lattice: &ScenarioLattice, agent: usize) -> f64 {
        let m = lattice.steps();
        let dt = lattice.dt();
        let n = self.driver[agent].dim();
        let sq = |v: &[f64], k: usize| -> f64 {
            let per: Vec<f64> = v.chunks(n).map(|c| c.iter().map(|x| x * x).sum()).collect();
            lattice.mean_scalar(k, &per)
        };
        let mut total = self.initial[agent] + sq(&self.terminal[agent], m);
        for k in 0..m {
            total += dt * (sq(self.drift[agent].step(k), k) + sq(self.driver[agent].step(k + 1), k + 1));
        }
        total + lattice.horizon() * (self.vol0[agent] + self.vol[agent])
    }

    pub fn total(&self, lattice: &ScenarioLattice) -> f64 {
        (0..self.initial.len()).map(|i| self.agent_total(lattice, i)).sum()
    }
}

/// Differences of the coefficients of `a` and `b` evaluated on `along`
/// (a solution of either model on `lattice`).
pub fn difference_terms(
    a: &MarketModel,
    b: &MarketModel,
    along: &EquilibriumSolution,
    lattice: &ScenarioLattice,
) -> Result<DifferenceTerms> {
    let n = a.securities();
    let nag = a.agent_count();
    if b.securities() != n || b.agent_count() != nag || along.agents() != nag {
        return Err(Error::shape("models and solution must share securities and agents"));
    }
    a.check_lattice(lattice)?;
    b.check_lattice(lattice)?;
    let m = lattice.steps();
    let pa = a.initial_law().lattice_positions(nag);
    let pb = b.initial_law().lattice_positions(nag);
    let initial = pa
        .iter()
        .zip(&pb)
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum())
        .collect();
    let d0 = a.common_noise_dim();
    let d = a.idio_noise_dim();
    let mut vol0 = Vec::with_capacity(nag);
    let mut vol = Vec::with_capacity(nag);
    for i in 0..nag {
        let (ba, bb) = (a.agent(i), b.agent(i));
        let f0: f64 = ba.vol0_matrix(n, d0).iter().zip(bb.vol0_matrix(n, d0)).map(|(x, y)| (x - y).powi(2)).sum();
        let f1: f64 = ba.vol_matrix(n, d).iter().zip(bb.vol_matrix(n, d)).map(|(x, y)| (x - y).powi(2)).sum();
        vol0.push(f0);
        vol.push(f1);
    }
    let mut c0 = vec![0.0; n];
    let mut ci = vec![0.0; n];
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    let mut driver = Vec::with_capacity(nag);
    let mut drift = Vec::with_capacity(nag);
    for i in 0..nag {
        let (ba, bb) = (a.agent(i), b.agent(i));
        let mut dr = AdaptedProcess::zeros(lattice, n, crate::lattice::Measurability::Full);
        let mut df = AdaptedProcess::zeros(lattice, n, crate::lattice::Measurability::Full);
        for k in 0..=m {
            let t = lattice.time(k);
            for node in 0..lattice.node_count(k) {
                let x = along.x[i].at(k, node);
                let y = along.y[i].at(k, node);
                let phi = along.phi.at(k, node);
                a.exo_common(lattice, k, node, &mut c0);
                a.exo_idio(lattice, i, k, node, &mut ci);
                ba.dfdx(t, x, phi, &c0, &ci, &mut ga);
                b.exo_common(lattice, k, node, &mut c0);
                b.exo_idio(lattice, i, k, node, &mut ci);
                bb.dfdx(t, x, phi, &c0, &ci, &mut gb);
                for (o, (u, v)) in dr.at_mut(k, node).iter_mut().zip(ga.iter().zip(&gb)) {
                    *o = u - v;
                }
                let ra = a.optimal_rate(y, phi);
                let rb = b.optimal_rate(y, phi);
                a.exo_common(lattice, k, node, &mut c0);
                a.exo_idio(lattice, i, k, node, &mut ci);
                ba.flow(t, phi, &c0, &ci, &mut ga);
                b.exo_common(lattice, k, node, &mut c0);
                b.exo_idio(lattice, i, k, node, &mut ci);
                bb.flow(t, phi, &c0, &ci, &mut gb);
                for (c, o) in df.at_mut(k, node).iter_mut().enumerate() {
                    *o = (ra[c] + ga[c]) - (rb[c] + gb[c]);
                }
            }
        }
        driver.push(dr);
        drift.push(df);
    }
    let leaves = lattice.node_count(m);
    let grads = |model: &MarketModel| -> Vec<Vec<f64>> {
        let mut c0 = vec![0.0; n];
        let mut ci = vec![0.0; n];
        (0..nag)
            .map(|i| {
                let mut g = vec![0.0; leaves * n];
                for node in 0..leaves {
                    model.exo_common(lattice, m, node, &mut c0);
                    model.exo_idio(lattice, i, m, node, &mut ci);
                    model.agent(i).dgdx(along.x[i].at(m, node), &c0, &ci, &mut g[node * n..(node + 1) * n]);
                }
                g
            })
            .collect()
    };
    let map = |model: &MarketModel| crate::model::terminal_map(&grads(model), model.discount());
    let ta = map(a)?;
    let tb = map(b)?;
    let terminal = ta
        .iter()
        .zip(&tb)
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| x - y).collect())
        .collect();
    Ok(DifferenceTerms {
        initial,
        terminal,
        driver,
        drift,
        vol0,
        vol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        let ratio = if rhs == 0.0 && lhs == 0.0 { 0.0 } else { lhs / rhs };
        Self { lhs, rhs, ratio }
    }
}

/// `E[max_k v_k]` over lattice paths for per-node scalars `v_k`.
pub fn path_sup_expectation(lattice: &ScenarioLattice, values: &[Vec<f64>]) -> f64 {
    let mut running = values[0].clone();
    for k in 1..=lattice.steps() {
        running = values[k]
            .iter()
            .enumerate()
            .map(|(node, v)| v.max(running[lattice.parent(node)]))
            .collect();
    }
    lattice.mean_scalar(lattice.steps(), &running)
}

fn squared_norms(v: &[f64], dim: usize) -> Vec<f64> {
    v.chunks(dim).map(|c| c.iter().map(|x| x * x).sum()).collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Compares `Σ_i E[sup|ΔX|² + sup|ΔY|² + ∫|ΔZ|²]` with the total of the
/// difference terms.
pub fn stability_bound_check(
    base: &EquilibriumSolution,
    perturbed: &EquilibriumSolution,
    terms: &DifferenceTerms,
    lattice: &ScenarioLattice,
) -> Result<BoundCheck> {
    if base.agents() != perturbed.agents() || terms.initial.len() != base.agents() {
        return Err(Error::shape("solutions and difference terms must share the agent count"));
    }
    let m = lattice.steps();
    let dt = lattice.dt();
    let mut lhs = 0.0;
    for i in 0..base.agents() {
        for (p, q) in [(&base.x[i], &perturbed.x[i]), (&base.y[i], &perturbed.y[i])] {
            p.check_on(lattice)?;
            q.check_on(lattice)?;
            let vals: Vec<Vec<f64>> = (0..=m).map(|k| squared_norms(&diff(p.step(k), q.step(k)), p.dim())).collect();
            lhs += path_sup_expectation(lattice, &vals);
        }
        for (p, q) in [(&base.z0[i], &perturbed.z0[i]), (&base.zij[i], &perturbed.zij[i])] {
            if p.dim() != q.dim() || p.steps() != q.steps() {
                return Err(Error::shape("martingale coefficients stored with different layouts"));
            }
            for k in 0..m {
                let s = squared_norms(&diff(p.step(k), q.step(k)), p.dim().max(1));
                lhs += dt * lattice.mean_scalar(k, &s);
            }
        }
    }
    Ok(BoundCheck::new(lhs, terms.total(lattice)))
}

/// `sup_k E|φ^a_k − φ^b_k|² + E[sup_k |E[φ^a_k | F̄^0] − φ^b_k|²]`, with
/// `φ^b` common-measurable.
pub fn price_gap_lhs(phi_a: &AdaptedProcess, phi_b: &AdaptedProcess, lattice: &ScenarioLattice) -> Result<f64> {
    phi_a.check_on(lattice)?;
    phi_b.check_on(lattice)?;
    let n = phi_a.dim();
    let mut sup = 0.0f64;
    let mut cond = Vec::with_capacity(lattice.steps() + 1);
    for k in 0..=lattice.steps() {
        let d = diff(phi_a.step(k), phi_b.step(k));
        sup = sup.max(lattice.mean_scalar(k, &squared_norms(&d, n)));
        let pa = lattice.cond_expect_common(k, phi_a.step(k), n)?;
        cond.push(squared_norms(&diff(&pa, phi_b.step(k)), n));
    }
    Ok(sup + path_sup_expectation(lattice, &cond))
}

/// Ratio check against a reference-calibrated constant.
pub fn price_gap_bound_check(lhs: f64, w2_terms: f64, difference_terms: f64) -> BoundCheck {
    BoundCheck::new(lhs, w2_terms + difference_terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub agents: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `sup_t E[W2²(μ̄^N_t, L(Ȳ_t | F̄^0_t))]` for the
/// LQ representative adjoint with `n = 1`.
///
/// Given the common noise, `Ȳ^i_t − m_t = p_t Δ^i_t` with i.i.d. deviations,
/// and W2 is translation invariant, so the statistic only involves the
/// deviations. Gaussian laws (`s0` or `σ` positive) reduce to a standard
/// normal sample scaled by `p_t² u_t`; the two-point law without
/// idiosyncratic noise has `W2² = 4 a_t² |K/N − ½|` with `K ~ Bin(N, ½)`.
pub fn sample_conditional_w2(
    params: &LqParams,
    family: InitialFamily,
    agents: usize,
    paths: usize,
    seed: u64,
    steps: usize,
) -> Result<RatePoint> {
    if agents == 0 || paths == 0 || steps == 0 {
        return Err(Error::invalid("need agents, paths and steps ≥ 1"));
    }
    let r = continuous_riccati(params, steps)?;
    let u = deviation_variance(params, steps)?;
    let scale = r.deviation.iter().zip(&u).map(|(p, v)| p * p * v).fold(0.0, f64::max);
    let samples: Vec<f64> = match family {
        InitialFamily::TwoPoint => {
            if params.sigma != 0.0 {
                return Err(Error::UnsupportedFamily(
                    "two-point initial law with idiosyncratic noise has no closed-form conditional law".into(),
                ));
            }
            let bin = Binomial::new(agents as u64, 0.5).map_err(|e| Error::Domain(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..paths)
                .map(|_| {
                    let k = bin.sample(&mut rng) as f64;
                    4.0 * scale * (k / agents as f64 - 0.5).abs()
                })
                .collect()
        }
        InitialFamily::Gaussian => {
            let cells = uniform_cells(agents);
            let w = 1.0 / agents as f64;
            (0..paths)
                .into_par_iter()
                .map(|j| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(j as u64);
                    let mut z: Vec<f64> = (0..agents).map(|_| StandardNormal.sample(&mut rng)).collect();
                    z.sort_by(f64::total_cmp);
                    let acc: f64 = z
                        .iter()
                        .zip(&cells)
                        .map(|(c, (m1, m2))| c * c * w - 2.0 * c * m1 + m2)
                        .sum();
                    scale * acc.max(0.0)
                })
                .collect()
        }
    };
    let (value, stderr) = mean_stderr(&samples);
    Ok(RatePoint { agents, value, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateExperimentReport {
    pub grid: Vec<usize>,
    /// `sup_t E[W2²]` per N.
    pub w2: Vec<RatePoint>,
    /// `E|φ^Ho − φ^MFG|²` per N (sup over recorded times).
    pub price_gap: Vec<RatePoint>,
    pub w2_fit: LogLogFit,
    pub price_gap_fit: LogLogFit,
    /// Moment order used for `gamma_moment` and `gamma_g_moment`.
    pub q: u32,
    /// `sup_t E|Ȳ_t|^q`.
    pub gamma_moment: f64,
    /// `E|∂ḡ(X̄_T)|^q`.
    pub gamma_g_moment: f64,
}

impl RateExperimentReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Flat rows `(N, statistic, value, stderr)`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "N,statistic,value,stderr")?;
        for (name, pts) in [("w2_sq", &self.w2), ("price_gap_sq", &self.price_gap)] {
            for p in pts {
                writeln!(f, "{},{name},{:?},{:?}", p.agents, p.value, p.stderr)?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Moment estimates `(sup_t E|Ȳ_t|^q, E|γ^g X̄_T|^q)` of the LQ
/// representative, from samples of the mean-field state.
pub fn lq_moments(params: &LqParams, family: InitialFamily, q: u32, paths: usize, seed: u64, steps: usize) -> Result<(f64, f64)> {
    use crate::lqoracle::{simulate_lq, LqScheme, SimulationOptions};
    let ens = simulate_lq(
        params,
        InitialFamily::Gaussian,
        &SimulationOptions {
            agents: 1,
            steps,
            paths,
            seed,
            scheme: LqScheme::Exponential,
            record_steps: None,
            per_agent: false,
        },
    )?;
    let r = continuous_riccati(params, steps)?;
    let u = deviation_variance(params, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let qf = q as f64;
    let mut gamma = 0.0f64;
    let mut acc_y = vec![0.0; steps + 1];
    let mut acc_g = 0.0;
    for j in 0..paths {
        let draw: f64 = match family {
            InitialFamily::TwoPoint => {
                if params.sigma != 0.0 {
                    return Err(Error::UnsupportedFamily("two-point moments need σ = 0".into()));
                }
                if j % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            InitialFamily::Gaussian => StandardNormal.sample(&mut rng),
        };
        for k in 0..=steps {
            let dev = u[k].sqrt() * draw;
            let y = -ens.phi_mfg[j][k] + r.deviation[k] * dev;
            acc_y[k] += y.abs().powf(qf);
        }
        let xt = ens.xbar_mfg[j][steps] + u[steps].sqrt() * draw;
        acc_g += (params.gamma_g * xt).abs().powf(qf);
    }
    for v in acc_y {
        gamma = gamma.max(v / paths as f64);
    }
    Ok((gamma, acc_g / paths as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn gaussian_proxy_is_seeded_and_vanishes_for_a_point_mass() {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 50.0, -(i as f64) / 25.0]).collect();
        let a = EmpiricalMeasure::uniform(pts).unwrap();
        let one = w2_empirical_vs_gaussian_proxy(&a, &[0.5, -1.0], 0.3, 4).unwrap();
        assert_eq!(one, w2_empirical_vs_gaussian_proxy(&a, &[0.5, -1.0], 0.3, 4).unwrap());
        assert!(one > 0.0);
        let b = EmpiricalMeasure::uniform(vec![vec![1.0, 2.0]; 10]).unwrap();
        assert!(w2_empirical_vs_gaussian_proxy(&b, &[1.0, 2.0], 0.0, 1).unwrap() < 1e-12);
        assert!(w2_empirical_vs_gaussian_proxy(&b, &[1.0], 0.0, 1).is_err());
    }

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(v).unwrap()
    }

    #[test]
    fn one_dimensional_examples() {
        assert_eq!(w2_empirical_1d(&m1(&[0.3, 1.0]), &m1(&[0.3, 1.0])).unwrap(), 0.0);
        // both couplings of two atoms: (0→1, 2→3) costs 1, (0→3, 2→1) costs 5
        let brute = [((0.0f64 - 1.0).powi(2) + (2.0f64 - 3.0).powi(2)) / 2.0, ((0.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2)) / 2.0];
        let w = w2_empirical_1d(&m1(&[0.0, 2.0]), &m1(&[1.0, 3.0])).unwrap();
        assert!((w * w - brute[0].min(brute[1])).abs() < 1e-15);
        assert_eq!(w2_empirical_1d(&m1(&[0.0, 1.0]), &m1(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(w2_empirical_1d(&m1(&[0.0]), &m1(&[1.0, 0.0])), Err(Error::Shape(_))));
    }

    fn brute_force(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = a.len();
        perms(n)
            .iter()
            .map(|p| {
                (0..n)
                    .map(|i| a.points[i].iter().zip(&b.points[p[i]]).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    #[test]
    fn assignment_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for size in [3, 5] {
            for _ in 0..20 {
                let pts = |rng: &mut ChaCha8Rng| (0..size).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
                let a = EmpiricalMeasure::uniform(pts(&mut rng)).unwrap();
                let b = EmpiricalMeasure::uniform(pts(&mut rng)).unwrap();
                let w = w2_empirical_assignment(&a, &b).unwrap();
                assert!((w - brute_force(&a, &b)).abs() < 1e-12);
            }
        }
        let a = EmpiricalMeasure::uniform(vec![vec![1.0, 2.0], vec![0.0, 0.5]]).unwrap();
        assert_eq!(w2_empirical_assignment(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn assignment_cap() {
        let a = EmpiricalMeasure::from_scalars(&vec![0.0; ASSIGNMENT_CAP + 1]).unwrap();
        assert!(matches!(w2_empirical_assignment(&a, &a), Err(Error::Capacity { .. })));
    }

    fn simpson_oracle(a: &[f64], mean: f64, sd: f64) -> f64 {
        // adaptive Simpson on each quantile cell, substituting u = Φ(z)
        let mut x = a.to_vec();
        x.sort_by(f64::total_cmp);
        let n = x.len();
        let std = Normal::standard();
        fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let mut total = 0.0;
        for (i, v) in x.iter().enumerate() {
            let lo = if i == 0 { -12.0 } else { std.inverse_cdf(i as f64 / n as f64) };
            let hi = if i + 1 == n { 12.0 } else { std.inverse_cdf((i + 1) as f64 / n as f64) };
            let f = |z: f64| (v - mean - sd * z).powi(2) * std.pdf(z);
            let (fa, fb, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            total += simpson(&f, lo, hi, fa, fm, fb, whole, 1e-12, 40);
        }
        total
    }

    #[test]
    fn gaussian_w2_closed_form_cells() {
        assert_eq!(w2_empirical_vs_gaussian_1d(&m1(&[0.5, 0.5]), 0.5, 0.0).unwrap(), 0.0);
        let w = w2_empirical_vs_gaussian_1d(&m1(&[0.0, 2.0]), 1.0, 0.0).unwrap();
        assert!((w * w - 1.0).abs() < 1e-15);
        let a = [0.3, -1.2, 0.8, 2.0, -0.1];
        let w = w2_empirical_vs_gaussian_1d(&m1(&a), 0.2, 1.3).unwrap();
        assert!((w * w - simpson_oracle(&a, 0.2, 1.3)).abs() < 1e-8);
    }

    #[test]
    fn gaussian_w2_decreases_with_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sample = |n: usize| -> f64 {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            w2_empirical_vs_gaussian_1d(&m1(&v), 0.0, 1.0).unwrap().powi(2)
        };
        let small: f64 = (0..20).map(|_| sample(100)).sum::<f64>() / 20.0;
        let large: f64 = (0..20).map(|_| sample(10_000)).sum::<f64>() / 20.0;
        assert!(large < small && large < 0.01, "{small} {large}");
    }

    #[test]
    fn discrete_w2_weighted() {
        let a = EmpiricalMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.25, 0.75]).unwrap();
        let b = EmpiricalMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap();
        // a quarter of the mass moves distance one
        assert!((w2_discrete_1d(&a, &b).unwrap().powi(2) - 0.25).abs() < 1e-15);
        let u = m1(&[0.3, 1.1, -0.4]);
        let v = m1(&[2.0, 0.0, 0.1]);
        assert!((w2_discrete_1d(&u, &v).unwrap() - w2_empirical_1d(&u, &v).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn epsilon_values() {
        assert!((epsilon_n(1, 100).unwrap() - 0.1).abs() < 1e-15);
        assert!((epsilon_n(6, 64).unwrap() - 0.25).abs() < 1e-15);
        assert!((epsilon_n(4, 100).unwrap() - 0.1 * (1.0 + 100f64.ln())).abs() < 1e-12);
        assert!((epsilon_n(4, 100).unwrap() - 0.5605).abs() < 1e-4);
    }

    #[test]
    fn loglog_fits() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0, 1e4].iter().map(|&n: &f64| (n, 3.0 * n.powf(-0.5))).collect();
        let f = fit_loglog_slope(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        let c: Vec<(f64, f64)> = [2.0, 4.0, 8.0].iter().map(|&n| (n, 7.0)).collect();
        assert!(fit_loglog_slope(&c).unwrap().slope.abs() < 1e-15);
        assert!(matches!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(Error::Domain(_))));
    }

    #[test]
    fn hungarian_small() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = hungarian(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn two_point_sampler_is_deterministic() {
        let p = LqParams {
            s0: 0.5,
            ..LqParams::new(1.0, 1.0, 1.0, 1.0)
        };
        let a = sample_conditional_w2(&p, InitialFamily::TwoPoint, 100, 500, 7, 20).unwrap();
        let b = sample_conditional_w2(&p, InitialFamily::TwoPoint, 100, 500, 7, 20).unwrap();
        assert_eq!(a, b);
        assert!(a.value > 0.0);
        let p2 = LqParams { sigma: 0.3, ..p };
        assert!(matches!(
            sample_conditional_w2(&p2, InitialFamily::TwoPoint, 10, 10, 0, 5),
            Err(Error::UnsupportedFamily(_))
        ));
    }

    fn measure(n: usize, dim: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, dim), n)
            .prop_map(|p| EmpiricalMeasure::uniform(p).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metric_axioms(a in measure(5, 2), b in measure(5, 2), c in measure(5, 2)) {
            let ab = w2_empirical_assignment(&a, &b).unwrap();
            let ba = w2_empirical_assignment(&b, &a).unwrap();
            let bc = w2_empirical_assignment(&b, &c).unwrap();
            let ac = w2_empirical_assignment(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
            prop_assert!(ac <= ab + bc + 1e-10);
        }

        #[test]
        fn mean_is_dominated(a in measure(6, 2), b in measure(6, 2)) {
            let (ma, mb) = (a.mean(), b.mean());
            let gap = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(gap <= w2_empirical_assignment(&a, &b).unwrap() + 1e-12);
        }

        #[test]
        fn identity_coupling_bounds_w2(a in measure(6, 1), b in measure(6, 1)) {
            let paired = a.points.iter().zip(&b.points).map(|(x, y)| (x[0] - y[0]).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(w2_empirical_1d(&a, &b).unwrap().powi(2) <= paired + 1e-12);
        }

        #[test]
        fn assignment_equals_sorting_in_one_dimension(a in measure(7, 1), b in measure(7, 1)) {
            let x = w2_empirical_assignment(&a, &b).unwrap();
            let y = w2_empirical_1d(&a, &b).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }

        #[test]
        fn epsilon_monotone(n in 1usize..8, m in 2usize..10_000) {
            prop_assert!(epsilon_n(n, m + 1).unwrap() <= epsilon_n(n, m).unwrap());
        }
    }
}
