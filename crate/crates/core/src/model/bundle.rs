use serde::{Deserialize, Serialize};

/// Per-agent coefficients.
///
/// One family covers both built-in instances. With `eps_f = eps_g = kappa = 0`
/// it is the linear-quadratic bundle; positive values add the smooth
/// perturbations
///
/// ```text
/// f̄(x) = ½γ^f|x|² + ε_f Σ log cosh x_k
/// ḡ(x) = ½γ^g|x|² + ε_g Σ log cosh x_k
/// l(t, v, c0, c) = γ^l v + κ tanh(v) + l0 + c0 + c
/// ```
///
/// and volatilities `σ^0 = sigma0·I_{n×d0}`, `σ = sigma·I_{n×d}` (rectangular
/// identities). None of the coefficients depend on `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientBundle {
    pub gamma_f: f64,
    pub gamma_g: f64,
    pub gamma_l: f64,
    #[serde(default)]
    pub l0: f64,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub eps_f: f64,
    #[serde(default)]
    pub eps_g: f64,
    #[serde(default)]
    pub kappa: f64,
}

impl CoefficientBundle {
    pub fn lq(gamma_f: f64, gamma_g: f64, gamma_l: f64) -> Self {
        Self {
            gamma_f,
            gamma_g,
            gamma_l,
            l0: 0.0,
            sigma0: 0.0,
            sigma: 0.0,
            eps_f: 0.0,
            eps_g: 0.0,
            kappa: 0.0,
        }
    }

    pub fn with_flow(mut self, l0: f64) -> Self {
        self.l0 = l0;
        self
    }

    pub fn with_vol(mut self, sigma0: f64, sigma: f64) -> Self {
        self.sigma0 = sigma0;
        self.sigma = sigma;
        self
    }

    pub fn with_perturbation(mut self, eps_f: f64, eps_g: f64, kappa: f64) -> Self {
        self.eps_f = eps_f;
        self.eps_g = eps_g;
        self.kappa = kappa;
        self
    }

    pub fn is_lq(&self) -> bool {
        self.eps_f == 0.0 && self.eps_g == 0.0 && self.kappa == 0.0
    }

    #[inline]
    pub fn dfdx(&self, _t: f64, x: &[f64], _phi: &[f64], _c0: &[f64], _c: &[f64], out: &mut [f64]) {
        for (o, &xk) in out.iter_mut().zip(x) {
            *o = self.gamma_f * xk + self.eps_f * xk.tanh();
        }
    }

    #[inline]
    pub fn dgdx(&self, x: &[f64], _c0: &[f64], _c: &[f64], out: &mut [f64]) {
        for (o, &xk) in out.iter_mut().zip(x) {
            *o = self.gamma_g * xk + self.eps_g * xk.tanh();
        }
    }

    #[inline]
    pub fn flow(&self, _t: f64, phi: &[f64], c0: &[f64], c: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let v = phi[k];
            *o = self.gamma_l * v + self.kappa * v.tanh() + self.l0 + c0[k] + c[k];
        }
    }

    pub fn fbar(&self, _t: f64, x: &[f64], _phi: &[f64], _c0: &[f64], _c: &[f64]) -> f64 {
        x.iter()
            .map(|&xk| 0.5 * self.gamma_f * xk * xk + self.eps_f * log_cosh(xk))
            .sum()
    }

    pub fn gbar(&self, x: &[f64], _c0: &[f64], _c: &[f64]) -> f64 {
        x.iter()
            .map(|&xk| 0.5 * self.gamma_g * xk * xk + self.eps_g * log_cosh(xk))
            .sum()
    }

    /// `σ^0` entry `(row, col)` of the `n × d0` matrix.
    #[inline]
    pub fn vol0(&self, row: usize, col: usize) -> f64 {
        if row == col {
            self.sigma0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn vol(&self, row: usize, col: usize) -> f64 {
        if row == col {
            self.sigma
        } else {
            0.0
        }
    }

    pub fn vol0_matrix(&self, n: usize, d0: usize) -> Vec<f64> {
        (0..n * d0).map(|i| self.vol0(i / d0.max(1), i % d0.max(1))).collect()
    }

    pub fn vol_matrix(&self, n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|i| self.vol(i / d.max(1), i % d.max(1))).collect()
    }

    /// Lipschitz constant of `∂x f̄` and `l` in the price slot.
    pub fn lipschitz_price(&self) -> f64 {
        self.gamma_l.abs() + self.kappa.abs()
    }

    /// Declared growth/Lipschitz bound `L` for `n` securities.
    pub fn lipschitz(&self, n: usize) -> f64 {
        let rn = (n as f64).sqrt();
        1.0 + (self.gamma_f.abs()
            + self.gamma_g.abs()
            + self.gamma_l.abs()
            + self.kappa.abs()
            + self.eps_f.abs()
            + self.eps_g.abs())
            * (1.0 + rn)
            + (self.l0.abs() + self.sigma0.abs() + self.sigma.abs()) * rn
    }

    /// Largest `γ` allowed by the curvature constants; positive iff the
    /// compatibility requirement can be met.
    pub fn gamma_compat(&self) -> f64 {
        if self.gamma_l <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let lp = self.lipschitz_price();
        (self.gamma_f - lp * lp / (4.0 * self.gamma_l)).min(self.gamma_g)
    }
}

/// `log cosh x` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_central_differences() {
        let b = CoefficientBundle::lq(1.3, 0.7, 1.0).with_perturbation(0.4, 0.25, 0.3);
        let h = 1e-5;
        for &x0 in &[-3.1, -0.2, 0.0, 0.9, 4.4] {
            let mut g = [0.0];
            b.dfdx(0.0, &[x0], &[0.0], &[0.0], &[0.0], &mut g);
            let fd = (b.fbar(0.0, &[x0 + h], &[0.0], &[0.0], &[0.0])
                - b.fbar(0.0, &[x0 - h], &[0.0], &[0.0], &[0.0]))
                / (2.0 * h);
            assert!((g[0] - fd).abs() <= 1e-6 * (1.0 + g[0].abs()), "f at {x0}");
            b.dgdx(&[x0], &[0.0], &[0.0], &mut g);
            let fd = (b.gbar(&[x0 + h], &[0.0], &[0.0]) - b.gbar(&[x0 - h], &[0.0], &[0.0])) / (2.0 * h);
            assert!((g[0] - fd).abs() <= 1e-6 * (1.0 + g[0].abs()), "g at {x0}");
        }
    }

    #[test]
    fn log_cosh_is_stable() {
        assert_eq!(log_cosh(0.0), 0.0);
        assert!((log_cosh(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((log_cosh(0.5) - 0.5f64.cosh().ln()).abs() < 1e-15);
    }
}
