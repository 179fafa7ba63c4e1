//! Linear-quadratic specialization with `Λ = λI`, homogeneous agents.
//!
//! With `Ȳ = P·X̄ + q` for the population average and
//! `Y^i − Ȳ = p·(X^i − X̄)` for the deviations,
//!
//! ```text
//! Ṗ = γ^l P² − γ^f,      P_T = γ^g/(1−δ)
//! q̇ = γ^l P q − P l0,    q_T = 0
//! ṗ = p²/λ − γ^f,        p_T = γ^g
//! ```
//!
//! The discrete recursions in [`discrete_riccati`] are the exact
//! counterparts for the lattice scheme used by the solvers. The derivation
//! is written out in `docs/lq_derivation.md`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InitialFamily, LqParams};

/// Which scalar loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loading {
    /// `P`, loading of the mean adjoint on the mean state.
    Mean,
    /// `p`, loading of the adjoint deviation on the state deviation.
    Deviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub deviation: Vec<f64>,
    /// Offset `q` of the mean adjoint (zero when `l0 = 0`).
    pub offset: Vec<f64>,
    pub k: f64,
    pub c: f64,
    pub k_dev: f64,
    pub c_dev: f64,
}

impl RiccatiSolution {
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
}

fn terminal(params: &LqParams, which: Loading) -> f64 {
    match which {
        Loading::Mean => params.gamma_g / (1.0 - params.delta),
        Loading::Deviation => params.gamma_g,
    }
}

/// `(a, b)` with the loading solving `ẋ = a·x² − b`.
fn coefficients(params: &LqParams, which: Loading) -> Result<(f64, f64)> {
    match which {
        Loading::Mean => {
            if !(params.gamma_l > 0.0) {
                return Err(Error::DegenerateParameter(format!("gamma_l must be positive, got {}", params.gamma_l)));
            }
            Ok((params.gamma_l, params.gamma_f))
        }
        Loading::Deviation => {
            if !(params.lambda > 0.0) {
                return Err(Error::DegenerateParameter(format!("lambda must be positive, got {}", params.lambda)));
            }
            Ok((1.0 / params.lambda, params.gamma_f))
        }
    }
}

fn check_discount(params: &LqParams) -> Result<()> {
    if !(0.0..1.0).contains(&params.delta) {
        return Err(Error::invalid(format!("discount must lie in [0, 1), got {}", params.delta)));
    }
    if !(params.horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    Ok(())
}

/// Hyperbolic closed form of the loading at time `t`.
pub fn riccati_closed_form(params: &LqParams, which: Loading, t: f64) -> Result<f64> {
    check_discount(params)?;
    let (a, b) = coefficients(params, which)?;
    let xt = terminal(params, which);
    let tau = params.horizon - t;
    Ok(closed_form(a, b, xt, tau))
}

fn closed_form(a: f64, b: f64, xt: f64, tau: f64) -> f64 {
    if b == 0.0 {
        return xt / (1.0 + a * xt * tau);
    }
    // k = √(b/a), c = √(ab); divide numerator and denominator by cosh
    let k = (b / a).sqrt();
    let c = (a * b).sqrt();
    let th = (c * tau).tanh();
    k * (xt + k * th) / (k + xt * th)
}

fn rk4_backward(f: impl Fn(f64, f64) -> f64, xt: f64, horizon: f64, steps: usize) -> Vec<f64> {
    let h = horizon / steps as f64;
    let mut out = vec![0.0; steps + 1];
    out[steps] = xt;
    let mut x = xt;
    for k in (0..steps).rev() {
        let t = (k + 1) as f64 * h;
        // integrate ẋ = f(t, x) from t to t − h
        let k1 = f(t, x);
        let k2 = f(t - 0.5 * h, x - 0.5 * h * k1);
        let k3 = f(t - 0.5 * h, x - 0.5 * h * k2);
        let k4 = f(t - h, x - h * k3);
        x -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out[k] = x;
    }
    out
}

/// Classical RK4 integration of the loading backward from its terminal value,
/// returned on the uniform grid `t_k = k·T/steps`.
pub fn riccati_rk4(params: &LqParams, which: Loading, steps: usize) -> Result<Vec<f64>> {
    check_discount(params)?;
    if steps == 0 {
        return Err(Error::invalid("riccati_rk4 needs at least one step"));
    }
    let a = match which {
        Loading::Mean => params.gamma_l,
        Loading::Deviation => {
            coefficients(params, which)?;
            1.0 / params.lambda
        }
    };
    let b = params.gamma_f;
    Ok(rk4_backward(|_, x| a * x * x - b, terminal(params, which), params.horizon, steps))
}

/// Continuous loadings sampled on `steps + 1` grid points. The offset is
/// integrated by RK4 against the closed-form `P`.
pub fn continuous_riccati(params: &LqParams, steps: usize) -> Result<RiccatiSolution> {
    check_discount(params)?;
    let (a, b) = coefficients(params, Loading::Mean)?;
    let (ad, bd) = coefficients(params, Loading::Deviation)?;
    let pt = terminal(params, Loading::Mean);
    let pdt = terminal(params, Loading::Deviation);
    let big_t = params.horizon;
    let grid: Vec<f64> = (0..=steps).map(|k| big_t * k as f64 / steps as f64).collect();
    let mean: Vec<f64> = grid.iter().map(|&t| closed_form(a, b, pt, big_t - t)).collect();
    let deviation: Vec<f64> = grid.iter().map(|&t| closed_form(ad, bd, pdt, big_t - t)).collect();
    let offset = if params.l0 == 0.0 {
        vec![0.0; steps + 1]
    } else {
        // refine so the offset is accurate even on coarse output grids
        let sub = 64;
        let fine = rk4_backward(
            |t, q| {
                let p = closed_form(a, b, pt, big_t - t);
                params.gamma_l * p * q - p * params.l0
            },
            0.0,
            big_t,
            steps * sub,
        );
        (0..=steps).map(|k| fine[k * sub]).collect()
    };
    Ok(RiccatiSolution {
        grid,
        mean,
        deviation,
        offset,
        k: (b / a).sqrt(),
        c: (a * b).sqrt(),
        k_dev: (params.gamma_f * params.lambda).sqrt(),
        c_dev: (params.gamma_f / params.lambda).sqrt(),
    })
}

/// Exact loadings of the lattice scheme
///
/// ```text
/// Y_k = E[Y_{k+1} + ∂f̄(X_{k+1}) dt | F_k],
/// X_{k+1} = X_k + (α̂(Y_k, φ_k) + l(φ_k)) dt + noise,   φ_k = −Ȳ_k
/// ```
///
/// on `steps` uniform steps. With `A = P_{k+1} + γ^f dt` and
/// `A' = p_{k+1} + γ^f dt`:
///
/// ```text
/// P_k = A / (1 + γ^l dt A),   q_k = (A l0 dt + q_{k+1}) / (1 + γ^l dt A)
/// p_k = A' / (1 + dt A'/λ)
/// ```
pub fn discrete_riccati(params: &LqParams, steps: usize) -> Result<RiccatiSolution> {
    check_discount(params)?;
    if steps == 0 {
        return Err(Error::invalid("discrete_riccati needs at least one step"));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::DegenerateParameter("lambda must be positive".into()));
    }
    let dt = params.horizon / steps as f64;
    let mut mean = vec![0.0; steps + 1];
    let mut deviation = vec![0.0; steps + 1];
    let mut offset = vec![0.0; steps + 1];
    mean[steps] = terminal(params, Loading::Mean);
    deviation[steps] = terminal(params, Loading::Deviation);
    for k in (0..steps).rev() {
        let a = mean[k + 1] + params.gamma_f * dt;
        let den = 1.0 + params.gamma_l * dt * a;
        mean[k] = a / den;
        offset[k] = (a * params.l0 * dt + offset[k + 1]) / den;
        let ad = deviation[k + 1] + params.gamma_f * dt;
        deviation[k] = ad / (1.0 + dt * ad / params.lambda);
    }
    let gl = params.gamma_l.max(f64::MIN_POSITIVE);
    Ok(RiccatiSolution {
        grid: (0..=steps).map(|k| k as f64 * dt).collect(),
        mean,
        deviation,
        offset,
        k: (params.gamma_f / gl).sqrt(),
        c: (params.gamma_f * params.gamma_l).sqrt(),
        k_dev: (params.gamma_f * params.lambda).sqrt(),
        c_dev: (params.gamma_f / params.lambda).sqrt(),
    })
}

/// Second moment of the gap between the finite-population average state and
/// its mean-field counterpart, and the implied squared price gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapVarianceSolution {
    pub grid: Vec<f64>,
    /// `E|X̄^N_t − x̄_t|²`.
    pub variance: Vec<f64>,
    /// `E|φ^Ho_t − φ^MFG_t|² = P(t)² · variance`.
    pub price_gap: Vec<f64>,
}

/// Solves `v' = −2γ^l P v + n σ²/N`, `v(0) = n s0²/N` with RK4 on `steps`
/// substeps per output interval.
pub fn gap_variance(params: &LqParams, securities: usize, agents: usize, steps: usize) -> Result<GapVarianceSolution> {
    check_discount(params)?;
    if agents == 0 || steps == 0 {
        return Err(Error::invalid("gap_variance needs agents ≥ 1 and steps ≥ 1"));
    }
    let (a, b) = coefficients(params, Loading::Mean)?;
    let pt = terminal(params, Loading::Mean);
    let big_t = params.horizon;
    let nn = securities as f64;
    let src = nn * params.sigma * params.sigma / agents as f64;
    let p_at = |t: f64| closed_form(a, b, pt, big_t - t);
    let sub = 32;
    let h = big_t / (steps * sub) as f64;
    let rhs = |t: f64, v: f64| -2.0 * params.gamma_l * p_at(t) * v + src;
    let mut v = nn * params.s0 * params.s0 / agents as f64;
    let mut variance = vec![v];
    for j in 0..steps * sub {
        let t = j as f64 * h;
        let k1 = rhs(t, v);
        let k2 = rhs(t + 0.5 * h, v + 0.5 * h * k1);
        let k3 = rhs(t + 0.5 * h, v + 0.5 * h * k2);
        let k4 = rhs(t + h, v + h * k3);
        v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (j + 1) % sub == 0 {
            variance.push(v);
        }
    }
    let grid: Vec<f64> = (0..=steps).map(|k| big_t * k as f64 / steps as f64).collect();
    let price_gap = grid.iter().zip(&variance).map(|(&t, &v)| p_at(t).powi(2) * v).collect();
    Ok(GapVarianceSolution {
        grid,
        variance,
        price_gap,
    })
}

/// Variance `u` of the representative deviation `X^i − x̄` given the common
/// noise: `u' = −2(p/λ)u + σ²`, `u(0) = s0²`, on `steps + 1` grid points.
pub fn deviation_variance(params: &LqParams, steps: usize) -> Result<Vec<f64>> {
    check_discount(params)?;
    let (a, b) = coefficients(params, Loading::Deviation)?;
    let pt = terminal(params, Loading::Deviation);
    let big_t = params.horizon;
    let sub = 32;
    let h = big_t / (steps * sub) as f64;
    let rhs = |t: f64, u: f64| -2.0 * closed_form(a, b, pt, big_t - t) / params.lambda * u + params.sigma * params.sigma;
    let mut u = params.s0 * params.s0;
    let mut out = vec![u];
    for j in 0..steps * sub {
        let t = j as f64 * h;
        let k1 = rhs(t, u);
        let k2 = rhs(t + 0.5 * h, u + 0.5 * h * k1);
        let k3 = rhs(t + 0.5 * h, u + 0.5 * h * k2);
        let k4 = rhs(t + h, u + h * k3);
        u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (j + 1) % sub == 0 {
            out.push(u);
        }
    }
    Ok(out)
}

/// Time stepping used by [`simulate_lq`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqScheme {
    /// Exponential integrator with coefficients frozen at step midpoints;
    /// approximates the continuous-time system.
    Exponential,
    /// The lattice scheme with the discrete loadings; reproduces the lattice
    /// solver's law exactly in mean and covariance.
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub agents: usize,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub scheme: LqScheme,
    /// Step indices at which the ensemble is recorded (default: all).
    #[serde(default)]
    pub record_steps: Option<Vec<usize>>,
    /// Also simulate every agent's deviation state (cost `O(agents)` per step).
    #[serde(default)]
    pub per_agent: bool,
}

/// Recorded ensemble; `phi_ho[path][j]` is at time `times[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqEnsemble {
    pub agents: usize,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub phi_ho: Vec<Vec<f64>>,
    pub phi_mfg: Vec<Vec<f64>>,
    pub xbar_n: Vec<Vec<f64>>,
    pub xbar_mfg: Vec<Vec<f64>>,
    /// `Y^i − Ȳ^N` per agent, when requested: `[path][j][agent]`.
    pub adjoint_deviation: Option<Vec<Vec<Vec<f64>>>>,
}

impl LqEnsemble {
    /// Mean and standard error of `|φ^Ho − φ^MFG|²` at recorded index `j`.
    pub fn gap_moment(&self, j: usize) -> (f64, f64) {
        let vals: Vec<f64> = self
            .phi_ho
            .iter()
            .zip(&self.phi_mfg)
            .map(|(a, b)| (a[j] - b[j]).powi(2))
            .collect();
        mean_stderr(&vals)
    }
}

impl LqEnsemble {
    /// Rows `(path, step, t, phi_ho, phi_mfg, xbar_n, xbar_mfg)`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use crate::io::fmt_f64;
        crate::io::write_table(
            path,
            &["path", "step", "t", "phi_ho", "phi_mfg", "xbar_n", "xbar_mfg"],
            (0..self.phi_ho.len()).flat_map(|i| {
                self.steps.iter().enumerate().map(move |(j, k)| {
                    vec![
                        i.to_string(),
                        k.to_string(),
                        fmt_f64(self.times[j]),
                        fmt_f64(self.phi_ho[i][j]),
                        fmt_f64(self.phi_mfg[i][j]),
                        fmt_f64(self.xbar_n[i][j]),
                        fmt_f64(self.xbar_mfg[i][j]),
                    ]
                })
            }),
        )
    }
}

pub(crate) fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = crate::lattice::pairwise_sum(vals) / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

const BLOCK: usize = 1024;

/// Simulates the finite-population average `X̄^N` and the mean-field state
/// `x̄` on the same common noise, one security.
///
/// `X̄^N − x̄` is driven only by the averaged idiosyncratic increments, so each
/// path needs two normals per step regardless of the population size. Paths
/// are simulated in blocks of 1024; block `b` draws from a ChaCha8 stream
/// seeded by `(seed, b)`.
pub fn simulate_lq(params: &LqParams, family: InitialFamily, opts: &SimulationOptions) -> Result<LqEnsemble> {
    if family != InitialFamily::Gaussian {
        return Err(Error::UnsupportedFamily("simulate_lq supports the Gaussian initial law only".into()));
    }
    if opts.agents == 0 || opts.steps == 0 || opts.paths == 0 {
        return Err(Error::invalid("simulate_lq needs agents, steps and paths ≥ 1"));
    }
    let m = opts.steps;
    let dt = params.horizon / m as f64;
    let record: Vec<usize> = match &opts.record_steps {
        Some(v) => {
            if v.iter().any(|&k| k > m) {
                return Err(Error::invalid("record step beyond the horizon"));
            }
            v.clone()
        }
        None => (0..=m).collect(),
    };
    // loadings at grid points and step midpoints
    let (pk, qk, dk) = match opts.scheme {
        LqScheme::Lattice => {
            let r = discrete_riccati(params, m)?;
            (r.mean, r.offset, r.deviation)
        }
        LqScheme::Exponential => {
            let r = continuous_riccati(params, 2 * m)?;
            (r.mean, r.offset, r.deviation)
        }
    };
    let nag = opts.agents;
    let inv_n = 1.0 / nag as f64;
    let sd_mean0 = params.s0 * inv_n.sqrt();
    let gl = params.gamma_l;
    let blocks = opts.paths.div_ceil(BLOCK);

    struct Path {
        ho: Vec<f64>,
        mfg: Vec<f64>,
        xn: Vec<f64>,
        xm: Vec<f64>,
        dev: Option<Vec<Vec<f64>>>,
    }

    let simulate_block = |b: usize| -> Vec<Path> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(b as u64);
        let count = BLOCK.min(opts.paths - b * BLOCK);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut xm = params.m0;
            let mut xn = params.m0 + sd_mean0 * z;
            let mut dev: Option<Vec<f64>> = if opts.per_agent {
                let raw: Vec<f64> = (0..nag)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        params.s0 * e
                    })
                    .collect();
                Some(raw)
            } else {
                None
            };
            if let Some(d) = dev.as_mut() {
                // the deviations share the simulated average
                let mean = d.iter().sum::<f64>() * inv_n;
                xn = params.m0 + mean;
                d.iter_mut().for_each(|v| *v -= mean);
            }
            let mut path = Path {
                ho: Vec::with_capacity(record.len()),
                mfg: Vec::with_capacity(record.len()),
                xn: Vec::with_capacity(record.len()),
                xm: Vec::with_capacity(record.len()),
                dev: dev.as_ref().map(|_| Vec::with_capacity(record.len())),
            };
            let mut next_rec = 0;
            for k in 0..=m {
                let (p_now, q_now, d_now) = match opts.scheme {
                    LqScheme::Lattice => (pk[k], qk[k], dk[k]),
                    LqScheme::Exponential => (pk[2 * k], qk[2 * k], dk[2 * k]),
                };
                while next_rec < record.len() && record[next_rec] == k {
                    path.ho.push(-(p_now * xn + q_now));
                    path.mfg.push(-(p_now * xm + q_now));
                    path.xn.push(xn);
                    path.xm.push(xm);
                    if let (Some(d), Some(pd)) = (dev.as_ref(), path.dev.as_mut()) {
                        pd.push(d.iter().map(|v| d_now * v).collect());
                    }
                    next_rec += 1;
                }
                if k == m {
                    break;
                }
                let w0: f64 = StandardNormal.sample(&mut rng);
                let dw0 = w0 * dt.sqrt();
                let (a_mean, a_dev, b_off, noise_scale_mean, noise_scale_dev);
                match opts.scheme {
                    LqScheme::Lattice => {
                        // X_{k+1} = X_k + (−γ^l(P_k X_k + q_k) + l0) dt + noise
                        a_mean = 1.0 - gl * p_now * dt;
                        a_dev = 1.0 - d_now / params.lambda * dt;
                        b_off = (-gl * q_now + params.l0) * dt;
                        noise_scale_mean = dt.sqrt();
                        noise_scale_dev = dt.sqrt();
                    }
                    LqScheme::Exponential => {
                        let pm = pk[2 * k + 1];
                        let qm = qk[2 * k + 1];
                        let dm = dk[2 * k + 1];
                        let r = -gl * pm;
                        let rd = -dm / params.lambda;
                        a_mean = (r * dt).exp();
                        a_dev = (rd * dt).exp();
                        let phi1 = if r == 0.0 { dt } else { (a_mean - 1.0) / r };
                        b_off = phi1 * (-gl * qm + params.l0);
                        noise_scale_mean = if r == 0.0 { dt.sqrt() } else { ((a_mean * a_mean - 1.0) / (2.0 * r)).sqrt() };
                        noise_scale_dev = if rd == 0.0 { dt.sqrt() } else { ((a_dev * a_dev - 1.0) / (2.0 * rd)).sqrt() };
                    }
                }
                // common noise enters both averages identically
                let common = match opts.scheme {
                    LqScheme::Lattice => params.sigma0 * dw0,
                    LqScheme::Exponential => params.sigma0 * w0 * noise_scale_mean,
                };
                xm = a_mean * xm + b_off + common;
                match dev.as_mut() {
                    None => {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        xn = a_mean * xn + b_off + common + params.sigma * inv_n.sqrt() * noise_scale_mean * e;
                    }
                    Some(d) => {
                        let incs: Vec<f64> = (0..nag)
                            .map(|_| {
                                let e: f64 = StandardNormal.sample(&mut rng);
                                e
                            })
                            .collect();
                        let inc_mean = incs.iter().sum::<f64>() * inv_n;
                        xn = a_mean * xn + b_off + common + params.sigma * noise_scale_mean * inc_mean;
                        for (v, e) in d.iter_mut().zip(&incs) {
                            *v = a_dev * *v + params.sigma * noise_scale_dev * (e - inc_mean);
                        }
                    }
                }
            }
            out.push(path);
        }
        out
    };

    let results: Vec<Vec<Path>> = (0..blocks).into_par_iter().map(simulate_block).collect();
    let mut ens = LqEnsemble {
        agents: nag,
        times: record.iter().map(|&k| k as f64 * dt).collect(),
        steps: record,
        phi_ho: Vec::with_capacity(opts.paths),
        phi_mfg: Vec::with_capacity(opts.paths),
        xbar_n: Vec::with_capacity(opts.paths),
        xbar_mfg: Vec::with_capacity(opts.paths),
        adjoint_deviation: if opts.per_agent { Some(Vec::with_capacity(opts.paths)) } else { None },
    };
    for block in results {
        for p in block {
            ens.phi_ho.push(p.ho);
            ens.phi_mfg.push(p.mfg);
            ens.xbar_n.push(p.xn);
            ens.xbar_mfg.push(p.xm);
            if let (Some(all), Some(d)) = (ens.adjoint_deviation.as_mut(), p.dev) {
                all.push(d);
            }
        }
    }
    Ok(ens)
}
