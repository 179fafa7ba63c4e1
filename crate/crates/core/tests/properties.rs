//! Equilibrium invariants over random LQ and perturbed markets.

use mfclear::fbsde::{clearing_residual, solve_equilibrium, SolverConfig};
use mfclear::lattice::{AdaptedProcess, Measurability};
use mfclear::lqoracle::discrete_riccati;
use mfclear::model::{evaluate_cost, InitialFamily, LqParams, MarketModel};
use proptest::prelude::*;

fn lq_params() -> impl Strategy<Value = LqParams> {
    (0.3..2.0f64, 0.3..2.0f64, 0.5..2.0f64, 0.5..2.0f64, 0.0..0.5f64, 0.0..0.5f64, -0.3..0.3f64, 0.0..0.5f64, 0.0..0.5f64).prop_map(
        |(gf, gg, gl, lambda, s0v, sv, l0, s0, delta)| LqParams {
            sigma0: s0v,
            sigma: sv,
            l0,
            s0,
            m0: 0.1,
            delta,
            ..LqParams::new(gf, gg, gl, lambda)
        },
    )
}

fn family() -> impl Strategy<Value = InitialFamily> {
    prop_oneof![Just(InitialFamily::TwoPoint), Just(InitialFamily::Gaussian)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lq_equilibrium_matches_discrete_loadings(p in lq_params(), fam in family(), agents in 1usize..4, steps in 1usize..4) {
        let model = MarketModel::from_lq(&p, 1, 1, 1, agents, fam).unwrap();
        let l = model.lattice(steps).unwrap();
        let s = solve_equilibrium(&model, &l, &SolverConfig::default()).unwrap();
        let d = discrete_riccati(&p, steps).unwrap();
        for k in 0..=steps {
            for node in 0..l.node_count(k) {
                let ys: Vec<f64> = s.y.iter().map(|y| y.at(k, node)[0]).collect();
                let xbar = s.x.iter().map(|x| x.at(k, node)[0]).sum::<f64>() / agents as f64;
                let ybar = ys.iter().sum::<f64>() / agents as f64;
                prop_assert!((s.phi.at(k, node)[0] + ybar).abs() <= 1e-14 * (1.0 + ybar.abs()));
                for (i, y) in ys.iter().enumerate() {
                    let want = d.deviation[k] * (s.x[i].at(k, node)[0] - xbar) + d.mean[k] * xbar + d.offset[k];
                    prop_assert!((y - want).abs() < 1e-8, "k {} node {} agent {}: {} vs {}", k, node, i, y, want);
                }
            }
        }
    }

    #[test]
    fn perturbed_equilibria_clear_and_are_optimal(
        p in lq_params(),
        eps in (0.0..0.3f64, 0.0..0.3f64, 0.0..0.1f64),
        agents in 2usize..4,
        seed in any::<u64>(),
    ) {
        let model = MarketModel::from_lq(&p, 1, 1, 1, agents, InitialFamily::Gaussian).unwrap();
        let model = model.with_agents(vec![p.bundle().with_perturbation(eps.0, eps.1, eps.2); agents]).unwrap();
        let l = model.lattice(2).unwrap();
        let s = solve_equilibrium(&model, &l, &SolverConfig::default()).unwrap();
        let r = clearing_residual(&s, &model, &l).unwrap().max_abs();
        prop_assert!(r <= 1e-12 * agents as f64 * s.rate_scale(&model).max(1.0));

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for agent in 0..agents {
            let alpha = s.rate(&model, agent);
            let base = evaluate_cost(&model, &l, agent, &alpha, &s.phi).unwrap();
            for _ in 0..5 {
                let beta = AdaptedProcess::from_fn(&l, 1, Measurability::Full, |_, _, o| o[0] = rng.random_range(-1.0..1.0));
                for e in [0.1, -0.01] {
                    let mut trial = alpha.clone();
                    for k in 0..trial.steps() {
                        for (a, b) in trial.step_mut(k).iter_mut().zip(beta.step(k)) {
                            *a += e * b;
                        }
                    }
                    let j = evaluate_cost(&model, &l, agent, &trial, &s.phi).unwrap();
                    prop_assert!(j - base >= -1e-12, "agent {} eps {}: {}", agent, e, j - base);
                }
            }
        }
    }
}
