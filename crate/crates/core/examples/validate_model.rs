//! Sampled assumption checks for an LQ market and a perturbed one.

use mfclear::model::{CoefficientBundle, InitialFamily, LqParams, MarketModel, ValidationOptions};

fn main() -> mfclear::Result<()> {
    let params = LqParams {
        sigma0: 0.3,
        sigma: 0.4,
        s0: 0.5,
        ..LqParams::new(1.0, 1.0, 1.0, 1.0)
    };
    let lq = MarketModel::from_lq(&params, 1, 1, 1, 3, InitialFamily::Gaussian)?;
    let perturbed = lq.with_agents(vec![CoefficientBundle::lq(1.0, 1.0, 1.0).with_perturbation(0.2, 0.1, 0.05); 3])?;
    let opts = ValidationOptions::default();
    for (name, model) in [("lq", &lq), ("perturbed", &perturbed)] {
        let report = mfclear::model::validate_assumptions(model, &opts);
        println!("{name}: all passed = {}, gamma = {:.4}", report.all_passed, report.gamma);
        for c in &report.checks {
            println!("  {:<24} {:<5} margin {:+.4e}", c.name, c.passed, c.margin);
        }
    }
    Ok(())
}
