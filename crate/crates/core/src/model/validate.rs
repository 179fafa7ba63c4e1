//! Sampled checks of the standing convexity, growth, Lipschitz and
//! monotonicity conditions.
//!
//! Every check reports a normalized margin: the smallest observed slack of
//! its inequality divided by the natural scale of the right side. Slack
//! below `1e-12` in magnitude is treated as exact equality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CoefficientBundle, MarketModel};

const FLUSH: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationOptions {
    pub samples: usize,
    pub seed: u64,
    /// Every sampled coordinate is uniform on `[-box_half_width, box_half_width]`.
    pub box_half_width: f64,
    /// Size of the sampled `σ`-field partitions in the conditional checks.
    pub group_size: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            box_half_width: 5.0,
            group_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub samples: usize,
    pub seed: u64,
    pub box_half_width: f64,
    /// Smallest sampled `⟨x′−x, ∂f̄(x′)−∂f̄(x)⟩/|x′−x|²` over agents.
    pub curvature_f: f64,
    pub curvature_g: f64,
    /// Compatibility constant `γ` (minimum over agents).
    pub gamma: f64,
    pub all_passed: bool,
}

impl AssumptionReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn passed(&self, name: &str) -> bool {
        self.check(name).is_some_and(|c| c.passed)
    }
}

struct Tracker {
    name: &'static str,
    min: f64,
    strict_ok: bool,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            min: f64::INFINITY,
            strict_ok: true,
        }
    }

    fn observe(&mut self, slack: f64, scale: f64) {
        let s = if scale > 0.0 { slack / scale } else { slack };
        let s = if s.abs() < FLUSH { 0.0 } else { s };
        if s < self.min {
            self.min = s;
        }
    }

    /// Strict requirement on a declared constant (e.g. `γ^l > 0`).
    fn require_positive(&mut self, value: f64) {
        if !(value > 0.0) {
            self.strict_ok = false;
        }
        self.min = self.min.min(value);
    }

    fn require_nonnegative(&mut self, value: f64) {
        self.min = self.min.min(value);
    }

    fn finish(self) -> AssumptionCheck {
        let margin = if self.min.is_finite() { self.min } else { 0.0 };
        AssumptionCheck {
            name: self.name.to_string(),
            passed: self.strict_ok && margin >= 0.0,
            margin,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn frob(b: &CoefficientBundle, n: usize, d0: usize, d: usize) -> (f64, f64) {
    (norm(&b.vol0_matrix(n, d0)), norm(&b.vol_matrix(n, d)))
}

/// Samples the model's coefficients and reports the margin of every
/// standing condition. Failures are reported, never returned as errors.
pub fn validate_assumptions(model: &MarketModel, opts: &ValidationOptions) -> AssumptionReport {
    let n = model.securities();
    let agents = model.agents();
    let nag = agents.len();
    let h = opts.box_half_width;
    let samples = opts.samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random_range(-h..=h)).collect() };

    let (lo, _hi) = model.fee_bounds();
    let mut fee = Tracker::new("fee_matrix_bounds");
    fee.require_positive(lo);

    let mut growth = Tracker::new("cost_growth");
    let mut lip = Tracker::new("gradient_lipschitz");
    let mut ggrowth = Tracker::new("gradient_growth");
    let mut conv_f = Tracker::new("convexity_f");
    let mut conv_g = Tracker::new("convexity_g");
    let mut flow_growth = Tracker::new("flow_vol_growth");
    let mut price_lip = Tracker::new("price_lipschitz");
    let mut consistency = Tracker::new("gradient_consistency");
    let mut curv_f = f64::INFINITY;
    let mut curv_g = f64::INFINITY;

    let mut discount = Tracker::new("discount_range");
    let delta = model.discount();
    discount.require_nonnegative(delta.min(1.0 - delta));
    if !(delta < 1.0) {
        discount.require_positive(1.0 - delta);
    }

    let gamma = agents.iter().map(|b| b.gamma_compat()).fold(f64::INFINITY, f64::min);
    let mut compat = Tracker::new("gamma_compatibility");
    compat.require_positive(gamma);

    let d0 = model.common_noise_dim();
    let d = model.idio_noise_dim();
    let mut gf = vec![0.0; n];
    let mut gf2 = vec![0.0; n];
    let mut gg = vec![0.0; n];
    let mut gg2 = vec![0.0; n];
    let mut lv = vec![0.0; n];
    let mut lv2 = vec![0.0; n];

    for b in agents {
        let big_l = b.lipschitz(n);
        let lphi = b.lipschitz_price();
        conv_f.require_nonnegative(b.gamma_f);
        conv_g.require_nonnegative(b.gamma_g);
        let (s0n, sn) = frob(b, n, d0, d);
        for _ in 0..samples {
            let t = rng.random_range(0.0..=model.horizon());
            let x = draw(&mut rng);
            let x2 = draw(&mut rng);
            let phi = draw(&mut rng);
            let phi2 = draw(&mut rng);
            let c0 = draw(&mut rng);
            let c = draw(&mut rng);
            let (nx, nphi, nc0, nc) = (norm(&x), norm(&phi), norm(&c0), norm(&c));

            let rhs = big_l * (1.0 + nx * nx + nphi * nphi + nc0 * nc0 + nc * nc);
            let lhs = b.fbar(t, &x, &phi, &c0, &c).abs() + b.gbar(&x, &c0, &c).abs();
            growth.observe(rhs - lhs, rhs);

            b.dfdx(t, &x, &phi, &c0, &c, &mut gf);
            b.dfdx(t, &x2, &phi, &c0, &c, &mut gf2);
            b.dgdx(&x, &c0, &c, &mut gg);
            b.dgdx(&x2, &c0, &c, &mut gg2);
            let dx = sub(&x2, &x);
            let ndx = norm(&dx);
            if ndx > 0.0 {
                let rhs = big_l * ndx;
                let lhs = norm(&sub(&gf2, &gf)) + norm(&sub(&gg2, &gg));
                lip.observe(rhs - lhs, rhs);
                let cf = dot(&dx, &sub(&gf2, &gf)) / (ndx * ndx);
                let cg = dot(&dx, &sub(&gg2, &gg)) / (ndx * ndx);
                curv_f = curv_f.min(cf);
                curv_g = curv_g.min(cg);
                conv_f.observe(cf - b.gamma_f, 1.0 + b.gamma_f);
                conv_g.observe(cg - b.gamma_g, 1.0 + b.gamma_g);
            }
            let rhs = big_l * (1.0 + nx + nphi + nc0 + nc);
            ggrowth.observe(rhs - (norm(&gf) + norm(&gg)), rhs);

            b.flow(t, &phi, &c0, &c, &mut lv);
            let rhs = big_l * (1.0 + nphi + nc0 + nc);
            flow_growth.observe(rhs - (norm(&lv) + s0n + sn), rhs);

            b.flow(t, &phi2, &c0, &c, &mut lv2);
            b.dfdx(t, &x, &phi2, &c0, &c, &mut gf2);
            let dphi = norm(&sub(&phi, &phi2));
            if dphi > 0.0 {
                let rhs = lphi * dphi;
                let lhs = norm(&sub(&gf, &gf2)) + norm(&sub(&lv, &lv2));
                price_lip.observe(rhs - lhs, rhs.max(dphi));
            }

            // central differences of the potentials against the gradients
            let k = rng.random_range(0..n);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += FD_STEP;
            xm[k] -= FD_STEP;
            let fd_f = (b.fbar(t, &xp, &phi, &c0, &c) - b.fbar(t, &xm, &phi, &c0, &c)) / (2.0 * FD_STEP);
            let fd_g = (b.gbar(&xp, &c0, &c) - b.gbar(&xm, &c0, &c)) / (2.0 * FD_STEP);
            let err = ((fd_f - gf[k]).abs() / (1.0 + gf[k].abs())).max((fd_g - gg[k]).abs() / (1.0 + gg[k].abs()));
            consistency.observe(FD_TOL - err, FD_TOL);
        }
    }

    // population conditions on empirical means of sampled vectors
    let mut flow_mono = Tracker::new("flow_monotonicity");
    let mut term_mono = Tracker::new("terminal_monotonicity");
    let gl_min = agents.iter().map(|b| b.gamma_l).fold(f64::INFINITY, f64::min);
    let gg_min = agents.iter().map(|b| b.gamma_g).fold(f64::INFINITY, f64::min);
    flow_mono.require_positive(gl_min);
    let wdelta = if delta < 1.0 { delta / (1.0 - delta) } else { f64::INFINITY };
    let pop_samples = (samples / nag.max(1)).max(1);
    for _ in 0..pop_samples {
        let t = rng.random_range(0.0..=model.horizon());
        let c0 = draw(&mut rng);
        let xs: Vec<Vec<f64>> = (0..nag).map(|_| draw(&mut rng)).collect();
        let xs2: Vec<Vec<f64>> = (0..nag).map(|_| draw(&mut rng)).collect();
        let cs: Vec<Vec<f64>> = (0..nag).map(|_| draw(&mut rng)).collect();
        let m1 = mean(&xs);
        let m2 = mean(&xs2);
        let dm = sub(&m1, &m2);
        let mut lhs = 0.0;
        let mut size = 0.0;
        for i in 0..nag {
            agents[i].flow(t, &m1, &c0, &cs[i], &mut lv);
            agents[i].flow(t, &m2, &c0, &cs[i], &mut lv2);
            let term = dot(&sub(&lv, &lv2), &sub(&xs[i], &xs2[i]));
            lhs += term;
            size += term.abs();
        }
        let rhs = nag as f64 * gl_min * dot(&dm, &dm);
        flow_mono.observe(lhs - rhs, (size + rhs).max(f64::MIN_POSITIVE));

        let g1: Vec<Vec<f64>> = (0..nag)
            .map(|i| {
                let mut g = vec![0.0; n];
                agents[i].dgdx(&xs[i], &c0, &cs[i], &mut g);
                g
            })
            .collect();
        let g2: Vec<Vec<f64>> = (0..nag)
            .map(|i| {
                let mut g = vec![0.0; n];
                agents[i].dgdx(&xs2[i], &c0, &cs[i], &mut g);
                g
            })
            .collect();
        let dg = sub(&mean(&g1), &mean(&g2));
        let mut lhs = 0.0;
        let mut sq = 0.0;
        for i in 0..nag {
            let dxi = sub(&xs[i], &xs2[i]);
            lhs += dot(&dg, &dxi);
            sq += dot(&dxi, &dxi);
        }
        let lhs = if delta == 0.0 { 0.0 } else { wdelta * lhs };
        term_mono.observe(lhs - (gamma - gg_min) * sq, sq);
    }

    // conditional versions: sample a partition into groups, E[·|G] = group mean
    let mut cflow = Tracker::new("conditional_flow_monotonicity");
    let mut cterm = Tracker::new("conditional_terminal_monotonicity");
    cflow.require_positive(gl_min);
    let base = &agents[0];
    let gsz = opts.group_size.max(1);
    let groups = (samples / (4 * gsz)).max(1);
    let mut cf_lhs = 0.0;
    let mut cf_rhs = 0.0;
    let mut cf_size = 0.0;
    let mut ct_lhs = 0.0;
    let mut ct_rhs = 0.0;
    for _ in 0..groups {
        let t = rng.random_range(0.0..=model.horizon());
        let xs: Vec<Vec<f64>> = (0..gsz).map(|_| draw(&mut rng)).collect();
        let xs2: Vec<Vec<f64>> = (0..gsz).map(|_| draw(&mut rng)).collect();
        let c0s: Vec<Vec<f64>> = (0..gsz).map(|_| draw(&mut rng)).collect();
        let cs: Vec<Vec<f64>> = (0..gsz).map(|_| draw(&mut rng)).collect();
        let m1 = mean(&xs);
        let m2 = mean(&xs2);
        let dm = sub(&m1, &m2);
        let mut gd = vec![vec![0.0; n]; gsz];
        for j in 0..gsz {
            base.flow(t, &m1, &c0s[j], &cs[j], &mut lv);
            base.flow(t, &m2, &c0s[j], &cs[j], &mut lv2);
            let term = dot(&sub(&lv, &lv2), &sub(&xs[j], &xs2[j]));
            cf_lhs += term;
            cf_size += term.abs();
            cf_rhs += base.gamma_l * dot(&dm, &dm);
            base.dgdx(&xs[j], &c0s[j], &cs[j], &mut gg);
            base.dgdx(&xs2[j], &c0s[j], &cs[j], &mut gg2);
            gd[j] = sub(&gg, &gg2);
        }
        let gdm = mean(&gd);
        for j in 0..gsz {
            let dxj = sub(&xs[j], &xs2[j]);
            ct_lhs += dot(&gdm, &dxj);
            ct_rhs += dot(&dxj, &dxj);
        }
    }
    cflow.observe(cf_lhs - cf_rhs, (cf_size + cf_rhs).max(f64::MIN_POSITIVE));
    let ct = if delta == 0.0 { 0.0 } else { wdelta * ct_lhs };
    cterm.observe(ct - (base.gamma_compat() - base.gamma_g) * ct_rhs, ct_rhs);

    let mut checks = vec![
        fee.finish(),
        growth.finish(),
        lip.finish(),
        ggrowth.finish(),
        conv_f.finish(),
        conv_g.finish(),
        flow_growth.finish(),
        discount.finish(),
        price_lip.finish(),
        flow_mono.finish(),
        term_mono.finish(),
        compat.finish(),
        cflow.finish(),
        cterm.finish(),
        consistency.finish(),
    ];
    for c in &mut checks {
        if c.margin.is_nan() {
            c.passed = false;
        }
    }
    let all_passed = checks.iter().all(|c| c.passed);
    AssumptionReport {
        checks,
        samples,
        seed: opts.seed,
        box_half_width: h,
        curvature_f: curv_f,
        curvature_g: curv_g,
        gamma,
        all_passed,
    }
}

fn mean(v: &[Vec<f64>]) -> Vec<f64> {
    let n = v[0].len();
    let inv = 1.0 / v.len() as f64;
    (0..n).map(|c| v.iter().map(|x| x[c]).sum::<f64>() * inv).collect()
}
