//! N-agent market-clearing equilibrium on a lattice, written to CSV.

use mfclear::fbsde::{clearing_residual, solve_equilibrium, SolverConfig};
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
    let model = MarketModel::from_lq(&params, 1, 1, 1, 3, InitialFamily::Gaussian)?;
    let lattice = model.lattice(3)?;
    let sol = solve_equilibrium(&model, &lattice, &SolverConfig::default())?;
    println!(
        "{}: {} iterations, residual {:.2e}",
        sol.diagnostics.solver, sol.diagnostics.iterations, sol.diagnostics.residual
    );
    println!("price at t=0: {:.6}", sol.phi.at(0, 0)[0]);
    let r = clearing_residual(&sol, &model, &lattice)?;
    println!("max |sum of rates| = {:.2e}", r.max_abs());

    let dir = std::env::temp_dir().join("mfclear-equilibrium");
    std::fs::create_dir_all(&dir)?;
    for f in mfclear::io::write_equilibrium(&dir, "lq", &sol)? {
        println!("wrote {}", dir.join(f).display());
    }
    Ok(())
}
