//! Picard with continuation against a global Newton solve on a tiny lattice.

use mfclear::fbsde::{newton_residual, solve_equilibrium, solve_global_newton, SolverConfig};
use mfclear::model::{CoefficientBundle, InitialFamily, LqParams, MarketModel};

fn main() -> mfclear::Result<()> {
    let params = LqParams {
        sigma0: 0.3,
        sigma: 0.4,
        s0: 0.5,
        ..LqParams::new(1.0, 1.0, 1.0, 1.0)
    };
    let lq = MarketModel::from_lq(&params, 1, 1, 1, 2, InitialFamily::TwoPoint)?;
    let perturbed = lq.with_agents(vec![
        CoefficientBundle::lq(1.0, 1.0, 1.0).with_perturbation(0.2, 0.1, 0.0),
        CoefficientBundle::lq(1.5, 0.5, 1.0).with_perturbation(0.1, 0.2, 0.0),
    ])?;
    let cfg = SolverConfig::default();
    for (name, model) in [("lq", lq), ("perturbed", perturbed)] {
        let lattice = model.lattice(2)?;
        let picard = solve_equilibrium(&model, &lattice, &cfg)?;
        let newton = solve_global_newton(&model, &lattice, &cfg)?;
        let dy = picard.y.iter().zip(&newton.y).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
        println!(
            "{name}: max |Y picard - Y newton| = {dy:.2e}, newton residual of picard = {:.2e}",
            newton_residual(&model, &lattice, &picard)?
        );
    }
    Ok(())
}
