//! Market instance: dimensions, fee matrix, per-agent coefficients and the
//! laws of the initial positions and exogenous processes.

mod bundle;
mod cost;
mod validate;

pub use bundle::{log_cosh, CoefficientBundle};
pub use cost::evaluate_cost;
pub use validate::{validate_assumptions, AssumptionCheck, AssumptionReport, ValidationOptions};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::lattice::ScenarioLattice;

/// Distribution family of the initial positions `ξ^i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialFamily {
    Gaussian,
    TwoPoint,
}

/// Common law of the initial positions: `mean + scale·Z` per coordinate, with
/// `Z` standard normal or a symmetric sign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub family: InitialFamily,
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl InitialLaw {
    pub fn deterministic(mean: Vec<f64>) -> Self {
        Self {
            family: InitialFamily::TwoPoint,
            mean,
            scale: 0.0,
        }
    }

    /// Initial positions used on a lattice with `agents` agents.
    ///
    /// The lattice carries no randomness at time zero, so each agent gets one
    /// fixed realization. Two-point laws alternate `mean ± scale` (exact
    /// empirical law for even `agents`); Gaussian laws use the stratified
    /// quantiles `Φ^{-1}((i + ½)/agents)`.
    pub fn lattice_positions(&self, agents: usize) -> Vec<Vec<f64>> {
        (0..agents)
            .map(|i| {
                let z = match self.family {
                    InitialFamily::TwoPoint => {
                        if i % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    InitialFamily::Gaussian => std_normal_quantile((i as f64 + 0.5) / agents as f64),
                };
                self.mean.iter().map(|m| m + self.scale * z).collect()
            })
            .collect()
    }

    /// Discrete approximation `(atoms, weights)` of the law; exact for the
    /// two-point family. Gaussian laws use `count` stratified quantiles.
    pub fn atoms(&self, count: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        if self.scale == 0.0 {
            return (vec![self.mean.clone()], vec![1.0]);
        }
        let zs: Vec<f64> = match self.family {
            InitialFamily::TwoPoint => vec![1.0, -1.0],
            InitialFamily::Gaussian => {
                let count = count.max(1);
                (0..count)
                    .map(|i| std_normal_quantile((i as f64 + 0.5) / count as f64))
                    .collect()
            }
        };
        let w = 1.0 / zs.len() as f64;
        let atoms = zs
            .iter()
            .map(|z| self.mean.iter().map(|m| m + self.scale * z).collect())
            .collect();
        (atoms, vec![w; zs.len()])
    }
}

pub(crate) fn std_normal_quantile(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

/// Affine process `level + loading · W` where `W` is the driving Brownian motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExoProcess {
    /// Constant part, length `n` (empty means zero).
    #[serde(default)]
    pub level: Vec<f64>,
    /// Row-major `n × dim` loading on the driving noise (empty means zero).
    #[serde(default)]
    pub loading: Vec<f64>,
}

impl ExoProcess {
    pub fn is_constant(&self) -> bool {
        self.loading.iter().all(|&v| v == 0.0)
    }
}

/// Exogenous inputs: `c^0` driven by `W^0`, each `c^i` by `W^i` with the
/// same specification for every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExogenousSpec {
    #[serde(default)]
    pub common: ExoProcess,
    #[serde(default)]
    pub idiosyncratic: ExoProcess,
}

/// Linear-quadratic parameter set with `Λ = λI`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqParams {
    pub gamma_f: f64,
    pub gamma_g: f64,
    pub gamma_l: f64,
    pub lambda: f64,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub l0: f64,
    #[serde(default)]
    pub m0: f64,
    #[serde(default)]
    pub s0: f64,
    pub horizon: f64,
    #[serde(default)]
    pub delta: f64,
}

impl LqParams {
    pub fn new(gamma_f: f64, gamma_g: f64, gamma_l: f64, lambda: f64) -> Self {
        Self {
            gamma_f,
            gamma_g,
            gamma_l,
            lambda,
            sigma0: 0.0,
            sigma: 0.0,
            l0: 0.0,
            m0: 0.0,
            s0: 0.0,
            horizon: 1.0,
            delta: 0.0,
        }
    }

    pub fn bundle(&self) -> CoefficientBundle {
        CoefficientBundle::lq(self.gamma_f, self.gamma_g, self.gamma_l)
            .with_flow(self.l0)
            .with_vol(self.sigma0, self.sigma)
    }

    /// Recovers the parameters of a homogeneous, isotropic LQ model.
    pub fn from_model(model: &MarketModel) -> Result<Self> {
        let b = &model.agents()[0];
        if !model.is_homogeneous() || !b.is_lq() {
            return Err(Error::UnsupportedFamily(
                "closed-form LQ needs homogeneous unperturbed LQ agents".into(),
            ));
        }
        let n = model.securities();
        let lambda = model.fee()[0];
        for r in 0..n {
            for c in 0..n {
                let want = if r == c { lambda } else { 0.0 };
                if model.fee()[r * n + c] != want {
                    return Err(Error::UnsupportedFamily("closed-form LQ needs Λ = λI".into()));
                }
            }
        }
        if !model.exogenous().common.is_constant()
            || !model.exogenous().idiosyncratic.is_constant()
            || model.exogenous().common.level.iter().any(|&v| v != 0.0)
            || model.exogenous().idiosyncratic.level.iter().any(|&v| v != 0.0)
        {
            return Err(Error::UnsupportedFamily("closed-form LQ needs zero exogenous inputs".into()));
        }
        let law = model.initial_law();
        Ok(Self {
            gamma_f: b.gamma_f,
            gamma_g: b.gamma_g,
            gamma_l: b.gamma_l,
            lambda,
            sigma0: b.sigma0,
            sigma: b.sigma,
            l0: b.l0,
            m0: law.mean[0],
            s0: law.scale,
            horizon: model.horizon(),
            delta: model.discount(),
        })
    }
}

/// Serialized form of [`MarketModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub securities: usize,
    pub common_noise_dim: usize,
    pub idio_noise_dim: usize,
    pub agent_count: usize,
    pub horizon: f64,
    pub discount: f64,
    /// Row-major `n × n` fee matrix `Λ`.
    pub fee: Vec<f64>,
    /// One bundle per agent, or a single bundle shared by all agents.
    pub agents: Vec<CoefficientBundle>,
    pub initial_law: InitialLaw,
    #[serde(default)]
    pub exogenous: ExogenousSpec,
}

/// Validated market instance. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct MarketModel {
    doc: ModelDocument,
    fee_inverse: Vec<f64>,
    fee_bounds: (f64, f64),
}

impl TryFrom<ModelDocument> for MarketModel {
    type Error = Error;

    fn try_from(mut doc: ModelDocument) -> Result<Self> {
        let n = doc.securities;
        if n == 0 {
            return Err(Error::invalid("need at least one security"));
        }
        if doc.agent_count == 0 {
            return Err(Error::invalid("need at least one agent"));
        }
        if !(doc.horizon > 0.0 && doc.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", doc.horizon)));
        }
        if !(0.0..1.0).contains(&doc.discount) {
            return Err(Error::invalid(format!("discount must lie in [0, 1), got {}", doc.discount)));
        }
        if doc.agents.len() == 1 && doc.agent_count > 1 {
            doc.agents = vec![doc.agents[0].clone(); doc.agent_count];
        }
        if doc.agents.len() != doc.agent_count {
            return Err(Error::invalid(format!(
                "{} coefficient bundles for {} agents",
                doc.agents.len(),
                doc.agent_count
            )));
        }
        if doc.fee.len() != n * n {
            return Err(Error::invalid(format!("fee matrix needs {} entries", n * n)));
        }
        if doc.initial_law.mean.len() != n {
            return Err(Error::invalid("initial mean has wrong dimension"));
        }
        if !(doc.initial_law.scale >= 0.0) {
            return Err(Error::invalid("initial scale must be nonnegative"));
        }
        check_exo(&doc.exogenous.common, n, doc.common_noise_dim, "common")?;
        check_exo(&doc.exogenous.idiosyncratic, n, doc.idio_noise_dim, "idiosyncratic")?;
        let fee = DMatrix::from_row_slice(n, n, &doc.fee);
        let asym = (&fee - fee.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + fee.abs().max()) {
            return Err(Error::invalid("fee matrix is not symmetric"));
        }
        let eig = SymmetricEigen::new(fee.clone());
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        if !(lo > 0.0) {
            return Err(Error::invalid(format!("fee matrix not positive definite (λ_min = {lo})")));
        }
        let inv = fee
            .try_inverse()
            .ok_or_else(|| Error::invalid("fee matrix is singular"))?;
        let fee_inverse = (0..n * n).map(|i| inv[(i / n, i % n)]).collect();
        Ok(Self {
            doc,
            fee_inverse,
            fee_bounds: (lo, hi),
        })
    }
}

impl From<MarketModel> for ModelDocument {
    fn from(m: MarketModel) -> Self {
        m.doc
    }
}

fn check_exo(p: &ExoProcess, n: usize, dim: usize, what: &str) -> Result<()> {
    if !p.level.is_empty() && p.level.len() != n {
        return Err(Error::invalid(format!("{what} exogenous level needs {n} entries")));
    }
    if !p.loading.is_empty() && p.loading.len() != n * dim {
        return Err(Error::invalid(format!("{what} exogenous loading needs {} entries", n * dim)));
    }
    Ok(())
}

impl MarketModel {
    pub fn new(doc: ModelDocument) -> Result<Self> {
        Self::try_from(doc)
    }

    /// Homogeneous LQ model with `Λ = λI`.
    pub fn from_lq(
        params: &LqParams,
        securities: usize,
        common_noise_dim: usize,
        idio_noise_dim: usize,
        agent_count: usize,
        family: InitialFamily,
    ) -> Result<Self> {
        let n = securities;
        let fee = (0..n * n)
            .map(|i| if i / n == i % n { params.lambda } else { 0.0 })
            .collect();
        Self::new(ModelDocument {
            securities: n,
            common_noise_dim,
            idio_noise_dim,
            agent_count,
            horizon: params.horizon,
            discount: params.delta,
            fee,
            agents: vec![params.bundle(); agent_count],
            initial_law: InitialLaw {
                family,
                mean: vec![params.m0; n],
                scale: params.s0,
            },
            exogenous: ExogenousSpec::default(),
        })
    }

    /// Same market with different agent bundles (count may change).
    pub fn with_agents(&self, agents: Vec<CoefficientBundle>) -> Result<Self> {
        let mut doc = self.doc.clone();
        doc.agent_count = agents.len();
        doc.agents = agents;
        Self::new(doc)
    }

    /// Same market with every agent using `bundle`.
    pub fn with_agent_count(&self, agent_count: usize) -> Result<Self> {
        self.with_agents(vec![self.doc.agents[0].clone(); agent_count])
    }

    pub fn with_exogenous(&self, exogenous: ExogenousSpec) -> Result<Self> {
        let mut doc = self.doc.clone();
        doc.exogenous = exogenous;
        Self::new(doc)
    }

    pub fn with_initial_law(&self, law: InitialLaw) -> Result<Self> {
        let mut doc = self.doc.clone();
        doc.initial_law = law;
        Self::new(doc)
    }

    pub fn document(&self) -> &ModelDocument {
        &self.doc
    }
    pub fn securities(&self) -> usize {
        self.doc.securities
    }
    pub fn common_noise_dim(&self) -> usize {
        self.doc.common_noise_dim
    }
    pub fn idio_noise_dim(&self) -> usize {
        self.doc.idio_noise_dim
    }
    pub fn agent_count(&self) -> usize {
        self.doc.agent_count
    }
    pub fn horizon(&self) -> f64 {
        self.doc.horizon
    }
    pub fn discount(&self) -> f64 {
        self.doc.discount
    }
    pub fn fee(&self) -> &[f64] {
        &self.doc.fee
    }
    pub fn fee_inverse(&self) -> &[f64] {
        &self.fee_inverse
    }
    /// Smallest and largest eigenvalue of `Λ`.
    pub fn fee_bounds(&self) -> (f64, f64) {
        self.fee_bounds
    }
    pub fn agents(&self) -> &[CoefficientBundle] {
        &self.doc.agents
    }
    pub fn agent(&self, i: usize) -> &CoefficientBundle {
        &self.doc.agents[i]
    }
    pub fn initial_law(&self) -> &InitialLaw {
        &self.doc.initial_law
    }
    pub fn exogenous(&self) -> &ExogenousSpec {
        &self.doc.exogenous
    }

    pub fn is_homogeneous(&self) -> bool {
        self.doc.agents.windows(2).all(|w| w[0] == w[1])
    }

    /// Lattice matching this model's noise dimensions and horizon.
    pub fn lattice(&self, steps: usize) -> Result<ScenarioLattice> {
        ScenarioLattice::new(
            steps,
            self.agent_count(),
            self.common_noise_dim(),
            self.idio_noise_dim(),
            self.horizon(),
        )
    }

    /// Representative-agent lattice (one idiosyncratic block).
    pub fn representative_lattice(&self, steps: usize) -> Result<ScenarioLattice> {
        ScenarioLattice::new(steps, 1, self.common_noise_dim(), self.idio_noise_dim(), self.horizon())
    }

    pub fn check_lattice(&self, lattice: &ScenarioLattice) -> Result<()> {
        if lattice.common_dim() != self.common_noise_dim()
            || lattice.idio_dim() != self.idio_noise_dim()
            || (lattice.horizon() - self.horizon()).abs() > 1e-12 * self.horizon()
        {
            return Err(Error::shape("lattice does not match the model's noise dimensions or horizon"));
        }
        Ok(())
    }

    /// `α̂(y, φ) = −Λ^{-1}(y + φ)`.
    pub fn optimal_rate(&self, y: &[f64], phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        optimal_rate_into(&self.fee_inverse, y, phi, &mut out);
        out
    }

    /// `c^0` at a lattice node.
    pub fn exo_common(&self, lattice: &ScenarioLattice, k: usize, node: usize, out: &mut [f64]) {
        eval_exo(&self.doc.exogenous.common, lattice, k, node, |j| lattice.common_coord(j), self.common_noise_dim(), out);
    }

    /// `c^i` of `agent` at a lattice node.
    pub fn exo_idio(&self, lattice: &ScenarioLattice, agent: usize, k: usize, node: usize, out: &mut [f64]) {
        eval_exo(
            &self.doc.exogenous.idiosyncratic,
            lattice,
            k,
            node,
            |j| lattice.idio_coord(agent, j),
            self.idio_noise_dim(),
            out,
        );
    }
}

fn eval_exo(
    p: &ExoProcess,
    lattice: &ScenarioLattice,
    k: usize,
    node: usize,
    coord: impl Fn(usize) -> usize,
    dim: usize,
    out: &mut [f64],
) {
    if p.level.is_empty() {
        out.iter_mut().for_each(|o| *o = 0.0);
    } else {
        out.copy_from_slice(&p.level);
    }
    if p.loading.is_empty() || p.is_constant() {
        return;
    }
    for j in 0..dim {
        let w = lattice.brownian_level(k, node, coord(j));
        for (r, o) in out.iter_mut().enumerate() {
            *o += p.loading[r * dim + j] * w;
        }
    }
}

#[inline]
pub(crate) fn optimal_rate_into(fee_inverse: &[f64], y: &[f64], phi: &[f64], out: &mut [f64]) {
    let n = y.len();
    for r in 0..n {
        let mut s = 0.0;
        for c in 0..n {
            s += fee_inverse[r * n + c] * (y[c] + phi[c]);
        }
        out[r] = -s;
    }
}

/// Terminal adjoint values from `∂x ḡ_i(X_T^i, ·)`:
/// `Y_T^i = δ/(1−δ)·mean_j ∂x ḡ_j + ∂x ḡ_i`.
pub fn terminal_map(g_values: &[Vec<f64>], delta: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::invalid(format!("discount must lie in [0, 1), got {delta}")));
    }
    if g_values.is_empty() {
        return Err(Error::invalid("terminal_map needs at least one agent"));
    }
    let n = g_values[0].len();
    let scale = delta / (1.0 - delta) / g_values.len() as f64;
    let shift: Vec<f64> = (0..n).map(|c| scale * g_values.iter().map(|g| g[c]).sum::<f64>()).collect();
    Ok(g_values
        .iter()
        .map(|g| g.iter().zip(&shift).map(|(a, b)| a + b).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc() -> ModelDocument {
        ModelDocument {
            securities: 2,
            common_noise_dim: 1,
            idio_noise_dim: 1,
            agent_count: 3,
            horizon: 1.0,
            discount: 0.25,
            fee: vec![2.0, 0.5, 0.5, 1.0],
            agents: vec![CoefficientBundle::lq(1.0, 1.0, 1.0).with_perturbation(0.1, 0.2, 0.05)],
            initial_law: InitialLaw {
                family: InitialFamily::Gaussian,
                mean: vec![0.1, -0.2],
                scale: 0.3,
            },
            exogenous: ExogenousSpec::default(),
        }
    }

    #[test]
    fn optimal_rate_examples() {
        let m = MarketModel::from_lq(&LqParams::new(1.0, 1.0, 1.0, 2.0), 1, 1, 1, 1, InitialFamily::Gaussian).unwrap();
        assert_eq!(m.optimal_rate(&[0.0], &[0.0]), vec![0.0]);
        assert_eq!(m.optimal_rate(&[1.0], &[1.0]), vec![-1.0]);
    }

    #[test]
    fn terminal_map_examples() {
        assert_eq!(terminal_map(&[vec![1.0], vec![3.0]], 0.0).unwrap(), vec![vec![1.0], vec![3.0]]);
        assert_eq!(terminal_map(&[vec![1.0], vec![3.0]], 0.5).unwrap(), vec![vec![3.0], vec![5.0]]);
        assert_eq!(terminal_map(&[vec![2.0]], 0.5).unwrap(), vec![vec![4.0]]);
        assert!(matches!(terminal_map(&[vec![2.0]], 1.0), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn rejects_bad_models() {
        let mut d = doc();
        d.discount = 1.0;
        assert!(MarketModel::new(d).is_err());
        let mut d = doc();
        d.fee = vec![1.0, 2.0, 2.0, 1.0];
        assert!(MarketModel::new(d).is_err());
        let mut d = doc();
        d.fee = vec![1.0, 0.3, 0.0, 1.0];
        assert!(MarketModel::new(d).is_err());
        let mut d = doc();
        d.agents = vec![CoefficientBundle::lq(1.0, 1.0, 1.0); 2];
        assert!(MarketModel::new(d).is_err());
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut d = doc();
        d.horizon = 0.1 + 0.2;
        d.agents[0].gamma_f = std::f64::consts::PI / 7.0;
        d.fee[3] = 1.0 / 3.0;
        let m = MarketModel::new(d).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: MarketModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.horizon().to_bits(), m.horizon().to_bits());
    }

    #[test]
    fn lattice_positions_two_point_alternate() {
        let law = InitialLaw {
            family: InitialFamily::TwoPoint,
            mean: vec![1.0],
            scale: 0.5,
        };
        assert_eq!(law.lattice_positions(3), vec![vec![1.5], vec![0.5], vec![1.5]]);
        let (atoms, w) = law.atoms(9);
        assert_eq!(atoms, vec![vec![1.5], vec![0.5]]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn clearing_identity(ys in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
            let m = MarketModel::new(ModelDocument { securities: 1, agent_count: 1, agents: vec![CoefficientBundle::lq(1.0,1.0,1.0)], fee: vec![0.7], initial_law: InitialLaw::deterministic(vec![0.0]), ..doc() }).unwrap();
            let phi = -ys.iter().sum::<f64>() / ys.len() as f64;
            let total: f64 = ys.iter().map(|&y| m.optimal_rate(&[y], &[phi])[0]).sum();
            let scale = ys.iter().fold(0.0f64, |a, y| a.max(y.abs())) / 0.7;
            prop_assert!(total.abs() <= 8.0 * f64::EPSILON * ys.len() as f64 * scale.max(1.0));
        }

        #[test]
        fn terminal_map_fixed_point(gs in proptest::collection::vec(-10.0f64..10.0, 1..9), delta in 0.0f64..0.95) {
            let g: Vec<Vec<f64>> = gs.iter().map(|&v| vec![v]).collect();
            let y = terminal_map(&g, delta).unwrap();
            let mean = y.iter().map(|v| v[0]).sum::<f64>() / y.len() as f64;
            for (yi, gi) in y.iter().zip(&g) {
                let r = yi[0] - (delta * mean + gi[0]);
                prop_assert!(r.abs() <= 1e-12 * (1.0 + yi[0].abs()));
            }
        }
    }
}
