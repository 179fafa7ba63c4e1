//! Rates in N of the empirical conditional law and of the price gap (reduced grid).

use mfclear::experiments::{run_convergence, ConvergenceConfig};
use mfclear::model::LqParams;

fn main() -> mfclear::Result<()> {
    let w2 = LqParams {
        s0: 1.0,
        ..LqParams::new(1.0, 1.0, 1.0, 1.0)
    };
    let gap = LqParams {
        sigma0: 0.3,
        sigma: 1.0,
        s0: 1.0,
        ..w2
    };
    let cfg = ConvergenceConfig {
        grid: vec![100, 1_000, 10_000],
        paths: 2_000,
        gap_grid: vec![10, 100, 1_000],
        gap_paths: 20_000,
        ..ConvergenceConfig::desk(w2, gap)
    };
    let r = run_convergence(&cfg, 7)?;
    for p in &r.w2 {
        println!("W2^2   N = {:>6}: {:.4e} ± {:.1e}", p.agents, p.value, p.stderr);
    }
    for p in &r.price_gap {
        println!("gap    N = {:>6}: {:.4e} ± {:.1e}", p.agents, p.value, p.stderr);
    }
    println!("slopes: W2^2 {:.3}, price gap {:.3}", r.w2_fit.slope, r.price_gap_fit.slope);
    Ok(())
}
