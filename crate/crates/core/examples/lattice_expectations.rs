//! Conditional expectations and martingale coefficients on a scenario lattice.

use mfclear::lattice::ScenarioLattice;

fn main() -> mfclear::Result<()> {
    // two agents, one common and one idiosyncratic coordinate each
    let l = ScenarioLattice::new(3, 2, 1, 1, 1.0)?;
    println!("branching {}, nodes per step {:?}", l.branching(), (0..=3).map(|k| l.node_count(k)).collect::<Vec<_>>());

    // W^0 is a martingale: E[W^0_3 | F_2] = W^0_2
    let w3: Vec<f64> = (0..l.node_count(3)).map(|n| l.brownian_level(3, n, 0)).collect();
    let e = l.cond_expect(2, &w3, 1)?;
    let w2: Vec<f64> = (0..l.node_count(2)).map(|n| l.brownian_level(2, n, 0)).collect();
    let err = e.iter().zip(&w2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |E[W0_3|F_2] - W0_2| = {err:.2e}");

    // (W^0)² − t has unit loading 2W^0 on ΔW^0
    let sq: Vec<f64> = w3.iter().map(|w| w * w - l.time(3)).collect();
    let z = l.martingale_coefficients(2, &sq, 1)?;
    let z0: Vec<f64> = z.chunks(l.noise_dim()).map(|c| c[0]).collect();
    let zerr = z0.iter().zip(&w2).map(|(a, w)| (a - 2.0 * w).abs()).fold(0.0, f64::max);
    println!("max |Z0 - 2 W0_2| = {zerr:.2e}");

    let common = l.cond_expect_common(3, &w3, 1)?;
    println!("E[W0_3 | common prefix] at the first node = {:.4}", common[0]);
    Ok(())
}
