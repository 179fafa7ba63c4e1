//! Mean-field price and its per-capita clearing error in finite populations.

use mfclear::fbsde::SolverConfig;
use mfclear::lqoracle::discrete_riccati;
use mfclear::mfg::{lq_clearing_residual, mfg_clearing_residual, solve_mkv};
use mfclear::model::{InitialFamily, LqParams, MarketModel};

fn main() -> mfclear::Result<()> {
    let params = LqParams {
        sigma0: 0.3,
        sigma: 0.4,
        s0: 0.5,
        l0: 0.1,
        delta: 0.2,
        ..LqParams::new(1.0, 1.0, 1.0, 1.0)
    };
    let rep = MarketModel::from_lq(&params, 1, 1, 1, 1, InitialFamily::TwoPoint)?;
    let steps = 2;
    let cfg = SolverConfig::default();
    let mkv = solve_mkv(&rep, &rep.representative_lattice(steps)?, &cfg)?;
    let ric = discrete_riccati(&params, steps)?;
    println!(
        "phi_MFG at t=0: {:.8} (LQ loadings give {:.8})",
        mkv.phi_mfg.at(0, 0)[0],
        -(ric.mean[0] * params.m0 + ric.offset[0])
    );
    for n in [2, 4, 8] {
        let model = rep.with_agent_count(n)?;
        let r = mfg_clearing_residual(&mkv, &model, &model.lattice(steps)?, &cfg)?;
        let f = lq_clearing_residual(&params, 1, n, steps, InitialFamily::TwoPoint)?;
        println!("N = {n}: lattice L2 {:.6e}, formula {:.6e}", r.l2, f.l2);
    }
    Ok(())
}
