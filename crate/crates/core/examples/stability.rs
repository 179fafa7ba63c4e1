//! Stability of the N-agent equilibrium under heterogeneous coefficient shifts.

use mfclear::experiments::{run_stability, PerturbationKind, StabilityConfig};
use mfclear::fbsde::SolverConfig;
use mfclear::model::{InitialFamily, LqParams};

fn main() -> mfclear::Result<()> {
    let cfg = StabilityConfig {
        params: LqParams {
            sigma0: 0.3,
            sigma: 0.4,
            s0: 0.5,
            l0: 0.1,
            delta: 0.2,
            ..LqParams::new(1.0, 1.0, 1.0, 1.0)
        },
        family: InitialFamily::TwoPoint,
        agents: 2,
        steps: 2,
        sizes: vec![0.2, 0.1, 0.05],
        kinds: vec![PerturbationKind::Flow, PerturbationKind::TerminalCurvature],
    };
    let r = run_stability(&cfg, &SolverConfig::default())?;
    for row in &r.rows {
        println!(
            "{:?} h = {:<4}: solution {:.3e}/{:.3e} = {:.4}, price gap ratio {:.4}",
            row.kind, row.h, row.solution.lhs, row.solution.rhs, row.solution.ratio, row.price_gap.ratio
        );
    }
    for (kind, s) in &r.ratio_spread {
        println!("{kind:?}: ratio spread {:.2}%", 100.0 * s);
    }
    println!("price-gap bound holds: {}", r.price_gap_holds);
    Ok(())
}
