//! Closed-form, RK4 and discrete Riccati loadings; gap variance profile.

use mfclear::lqoracle::{continuous_riccati, discrete_riccati, gap_variance, riccati_closed_form, riccati_rk4, Loading};
use mfclear::model::LqParams;

fn main() -> mfclear::Result<()> {
    let params = LqParams {
        sigma0: 0.3,
        sigma: 0.4,
        s0: 0.5,
        l0: 0.1,
        delta: 0.2,
        ..LqParams::new(1.0, 1.0, 1.0, 1.0)
    };
    let m = 100;
    for which in [Loading::Mean, Loading::Deviation] {
        let rk4 = riccati_rk4(&params, which, m)?;
        let err = (0..=m)
            .map(|k| Ok((rk4[k] - riccati_closed_form(&params, which, k as f64 / m as f64)?).abs()))
            .collect::<mfclear::Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!("{which:?}: closed form vs RK4 {err:.2e}");
    }
    let cont = continuous_riccati(&params, 4)?;
    for steps in [4, 8, 16, 32] {
        let d = discrete_riccati(&params, steps)?;
        println!("M = {steps:>2}: P_0 = {:.6} (continuous {:.6}), p_0 = {:.6}", d.mean[0], cont.mean[0], d.deviation[0]);
    }
    let gap = gap_variance(&params, 1, 100, 10)?;
    for (t, (v, g)) in gap.grid.iter().zip(gap.variance.iter().zip(&gap.price_gap)) {
        println!("t = {t:.1}: E|Xbar^N - xbar|^2 = {v:.3e}, price gap {g:.3e}");
    }
    Ok(())
}
