use crate::error::{Error, Result};
use crate::lattice::{pairwise_sum, AdaptedProcess, ScenarioLattice};

use super::MarketModel;

/// Expected cost of `agent` trading at rate `alpha` against `price`, computed
/// exactly over the lattice nodes.
///
/// The state follows the lattice Euler scheme
/// `X_{k+1} = X_k + (α_k + l(φ_k))dt + σ^0ΔW^0 + σΔW^i` from the agent's
/// lattice initial position, and the running cost of step `k` is
/// `(⟨φ_k, α_k⟩ + ½⟨α_k, Λα_k⟩ + f̄(t_{k+1}, X_{k+1}, φ_{k+1}))·dt`.
/// Evaluating `f̄` at the right end of the step makes
/// `α̂(Y_k, φ_k)` from the solvers the exact minimizer of this sum.
pub fn evaluate_cost(
    model: &MarketModel,
    lattice: &ScenarioLattice,
    agent: usize,
    alpha: &AdaptedProcess,
    price: &AdaptedProcess,
) -> Result<f64> {
    model.check_lattice(lattice)?;
    let n = model.securities();
    if agent >= lattice.agents() || agent >= model.agent_count() {
        return Err(Error::shape(format!("agent {agent} not on this lattice")));
    }
    if alpha.dim() != n || price.dim() != n {
        return Err(Error::shape("control and price must have dimension n"));
    }
    check_adapted(alpha, lattice, "control")?;
    check_adapted(price, lattice, "price")?;

    let bundle = model.agent(agent);
    let fee = model.fee();
    let dt = lattice.dt();
    let d0 = lattice.common_dim();
    let d = lattice.idio_dim();
    let x0 = model.initial_law().lattice_positions(model.agent_count())[agent].clone();

    let mut c0 = vec![0.0; n];
    let mut ci = vec![0.0; n];
    let mut drift = vec![0.0; n];

    let mut x_prev = x0;
    let mut per_step: Vec<f64> = Vec::with_capacity(lattice.steps() + 1);
    for k in 0..lattice.steps() {
        let t = lattice.time(k);
        let t1 = lattice.time(k + 1);
        // control part of step k, one value per step-k node
        let mut run = vec![0.0; lattice.node_count(k)];
        for (node, r) in run.iter_mut().enumerate() {
            let a = alpha.at(k, node);
            let phi = price.at(k, node);
            let mut v = 0.0;
            for row in 0..n {
                let mut la = 0.0;
                for col in 0..n {
                    la += fee[row * n + col] * a[col];
                }
                v += phi[row] * a[row] + 0.5 * a[row] * la;
            }
            *r = v * dt;
        }
        per_step.push(lattice.mean_scalar(k, &run));

        let mut x_next = vec![0.0; lattice.node_count(k + 1) * n];
        let mut state_cost = vec![0.0; lattice.node_count(k + 1)];
        for node in 0..lattice.node_count(k) {
            model.exo_common(lattice, k, node, &mut c0);
            model.exo_idio(lattice, agent, k, node, &mut ci);
            bundle.flow(t, price.at(k, node), &c0, &ci, &mut drift);
            let a = alpha.at(k, node);
            let xp = &x_prev[node * n..(node + 1) * n];
            for child in lattice.children(node) {
                let br = lattice.branch(child);
                let xc = &mut x_next[child * n..(child + 1) * n];
                for row in 0..n {
                    let mut v = xp[row] + (a[row] + drift[row]) * dt;
                    for j in 0..d0 {
                        v += bundle.vol0(row, j) * lattice.increment(br, lattice.common_coord(j));
                    }
                    for j in 0..d {
                        v += bundle.vol(row, j) * lattice.increment(br, lattice.idio_coord(agent, j));
                    }
                    xc[row] = v;
                }
            }
        }
        for child in 0..lattice.node_count(k + 1) {
            model.exo_common(lattice, k + 1, child, &mut c0);
            model.exo_idio(lattice, agent, k + 1, child, &mut ci);
            let xc = &x_next[child * n..(child + 1) * n];
            state_cost[child] = bundle.fbar(t1, xc, price.at(k + 1, child), &c0, &ci) * dt;
        }
        per_step.push(lattice.mean_scalar(k + 1, &state_cost));
        x_prev = x_next;
    }

    let m = lattice.steps();
    let delta = model.discount();
    let mut terminal = vec![0.0; lattice.node_count(m)];
    for (node, v) in terminal.iter_mut().enumerate() {
        model.exo_common(lattice, m, node, &mut c0);
        model.exo_idio(lattice, agent, m, node, &mut ci);
        let x = &x_prev[node * n..(node + 1) * n];
        let phi = price.at(m, node);
        let mtm: f64 = phi.iter().zip(x).map(|(p, xv)| p * xv).sum();
        *v = -delta * mtm + bundle.gbar(x, &c0, &ci);
    }
    per_step.push(lattice.mean_scalar(m, &terminal));
    Ok(pairwise_sum(&per_step))
}

fn check_adapted(p: &AdaptedProcess, lattice: &ScenarioLattice, what: &str) -> Result<()> {
    p.check_on(lattice).map_err(|e| match e {
        Error::Shape(msg) => Error::Adaptedness(format!("{what}: {msg}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Measurability;
    use crate::model::{CoefficientBundle, ExogenousSpec, InitialLaw, ModelDocument};

    fn model(bundle: CoefficientBundle, x0: f64, delta: f64) -> MarketModel {
        MarketModel::new(ModelDocument {
            securities: 1,
            common_noise_dim: 1,
            idio_noise_dim: 1,
            agent_count: 1,
            horizon: 1.0,
            discount: delta,
            fee: vec![1.0],
            agents: vec![bundle],
            initial_law: InitialLaw::deterministic(vec![x0]),
            exogenous: ExogenousSpec::default(),
        })
        .unwrap()
    }

    #[test]
    fn zero_model_has_zero_cost() {
        let m = model(CoefficientBundle::lq(0.0, 0.0, 0.0), 0.0, 0.0);
        let l = m.lattice(3).unwrap();
        let z = AdaptedProcess::zeros(&l, 1, Measurability::Full);
        assert_eq!(evaluate_cost(&m, &l, 0, &z, &z).unwrap(), 0.0);
    }

    #[test]
    fn terminal_only_cost() {
        let m = model(CoefficientBundle::lq(0.0, 1.0, 0.0), 1.0, 0.0);
        let l = m.lattice(2).unwrap();
        let z = AdaptedProcess::zeros(&l, 1, Measurability::Full);
        assert_eq!(evaluate_cost(&m, &l, 0, &z, &z).unwrap(), 0.5);
    }

    #[test]
    fn rejects_wrong_shape_as_adaptedness() {
        let m = model(CoefficientBundle::lq(1.0, 1.0, 1.0), 0.0, 0.0);
        let l = m.lattice(2).unwrap();
        let short = m.lattice(1).unwrap();
        let z = AdaptedProcess::zeros(&l, 1, Measurability::Full);
        let bad = AdaptedProcess::zeros(&short, 1, Measurability::Full);
        assert!(matches!(evaluate_cost(&m, &l, 0, &bad, &z), Err(Error::Adaptedness(_))));
    }

    #[test]
    fn matches_hand_expansion_one_step() {
        // One step, no noise: X_1 = x0 + (a + γl·φ0)dt.
        let b = CoefficientBundle::lq(2.0, 3.0, 0.5);
        let m = model(b, 0.4, 0.25);
        let l = crate::lattice::ScenarioLattice::new(1, 1, 1, 1, 1.0).unwrap();
        let alpha = AdaptedProcess::constant(&l, &[0.3]);
        let price = AdaptedProcess::constant(&l, &[-0.2]);
        let x1: f64 = 0.4 + 0.3 + 0.5 * -0.2;
        let want = (-0.2 * 0.3 + 0.5 * 0.09) + 0.5 * 2.0 * x1 * x1 - 0.25 * -0.2 * x1 + 0.5 * 3.0 * x1 * x1;
        let got = evaluate_cost(&m, &l, 0, &alpha.retag(Measurability::Full), &price).unwrap();
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}
