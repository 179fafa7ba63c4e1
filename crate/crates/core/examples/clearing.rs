//! Per-capita clearing error of the mean-field price across population sizes.

use mfclear::experiments::{run_clearing, ClearingConfig};
use mfclear::fbsde::SolverConfig;
use mfclear::model::{InitialFamily, LqParams};

fn main() -> mfclear::Result<()> {
    let cfg = ClearingConfig {
        params: LqParams {
            sigma0: 0.3,
            sigma: 0.4,
            s0: 0.5,
            ..LqParams::new(1.0, 1.0, 1.0, 1.0)
        },
        family: InitialFamily::TwoPoint,
        lattice_agents: vec![2, 4],
        formula_agents: vec![8, 16, 32],
        steps: 2,
    };
    let r = run_clearing(&cfg, &SolverConfig::default())?;
    for p in &r.points {
        println!("N = {:>2} ({}): {:.6e}", p.agents, p.source, p.l2);
    }
    println!("slope {:.4}", r.fit.slope);
    Ok(())
}
