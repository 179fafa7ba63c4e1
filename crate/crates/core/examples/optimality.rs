//! Each agent's equilibrium rate minimizes its cost against the clearing price.

use mfclear::fbsde::{solve_equilibrium, SolverConfig};
use mfclear::lattice::{AdaptedProcess, Measurability};
use mfclear::model::{evaluate_cost, InitialFamily, LqParams, MarketModel};
use rand::{Rng, SeedableRng};

fn main() -> mfclear::Result<()> {
    let params = LqParams {
        sigma0: 0.3,
        sigma: 0.4,
        s0: 0.5,
        l0: 0.1,
        ..LqParams::new(1.0, 1.0, 1.0, 1.0)
    };
    let model = MarketModel::from_lq(&params, 1, 1, 1, 2, InitialFamily::TwoPoint)?;
    let lattice = model.lattice(3)?;
    let sol = solve_equilibrium(&model, &lattice, &SolverConfig::default())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for agent in 0..2 {
        let alpha = sol.rate(&model, agent);
        let base = evaluate_cost(&model, &lattice, agent, &alpha, &sol.phi)?;
        let mut worst = f64::INFINITY;
        for _ in 0..20 {
            let beta = AdaptedProcess::from_fn(&lattice, 1, Measurability::Full, |_, _, o| o[0] = rng.random_range(-1.0..1.0));
            for eps in [0.1, -0.1, 0.01, -0.01] {
                let mut trial = alpha.clone();
                for k in 0..lattice.steps() {
                    for (a, b) in trial.step_mut(k).iter_mut().zip(beta.step(k)) {
                        *a += eps * b;
                    }
                }
                worst = worst.min(evaluate_cost(&model, &lattice, agent, &trial, &sol.phi)? - base);
            }
        }
        println!("agent {agent}: J = {base:.8}, smallest increase under perturbation {worst:.3e}");
    }
    Ok(())
}
