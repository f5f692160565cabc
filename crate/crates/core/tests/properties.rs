use bds_core::baselines::fm_transition_prob;
use bds_core::model::{Genotype, RateTriple, ReducedInterval, RegressionCoefficients};
use bds_core::sim::{simulate, uniformization_probs};
use bds_core::spectral::{invert_moments, invert_probabilities, SpectralOptions};
use proptest::prelude::*;

const N: usize = 64;

fn rates() -> impl Strategy<Value = RateTriple> {
    (0.01f64..0.4, 0.0f64..0.3, 0.01f64..0.4).prop_map(|(l, n, m)| RateTriple::new(l, n, m).unwrap())
}

fn opts() -> SpectralOptions {
    SpectralOptions {
        allow_alias: true,
        ..SpectralOptions::default()
    }
}

/// Mean particle time from `a` particles with net growth `g`.
fn exposure(a: usize, g: f64, t: f64) -> f64 {
    if g.abs() < 1e-12 {
        a as f64 * t
    } else {
        a as f64 * (g * t).exp_m1() / g
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_are_a_distribution(r in rates(), a in 1usize..8, t in 0.05f64..3.0) {
        let tm = invert_probabilities(a, t, &r, N, &opts()).unwrap();
        prop_assert!((tm.sum() - 1.0).abs() < 1e-9);
        prop_assert!(tm.p.iter().all(|&p| p > -1e-10));
        for m in 0..N {
            for l in a + 1..N {
                prop_assert!(tm.get(l, m).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn spectral_matches_uniformization(r in rates(), a in 1usize..5, t in 0.05f64..1.5) {
        let tm = invert_probabilities(a, t, &r, N, &opts()).unwrap();
        let u = uniformization_probs(a, t, &r, (a, N - 1)).unwrap();
        for l in 0..=a {
            for m in 0..24 {
                prop_assert!((tm.get(l, m) - u.get(l, m)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn moment_totals_match_unconditional_means(r in rates(), a in 1usize..8, t in 0.05f64..3.0) {
        let mm = invert_moments(a, t, &r, N, &opts()).unwrap();
        let total = |v: &[f64]| v.iter().sum::<f64>();
        let e = exposure(a, r.lambda - r.mu, t);
        let tol = 1e-7 * (1.0 + e);
        prop_assert!((total(&mm.m_star) - e).abs() < tol);
        prop_assert!((total(&mm.m_plus) - r.lambda * e).abs() < tol);
        prop_assert!((total(&mm.m_shift) - r.nu * e).abs() < tol);
        prop_assert!((total(&mm.m_minus) - r.mu * e).abs() < tol);
    }

    #[test]
    fn restricted_moments_are_nonnegative(r in rates(), a in 1usize..6, t in 0.05f64..2.0) {
        let mm = invert_moments(a, t, &r, N, &opts()).unwrap();
        for v in [&mm.m_plus, &mm.m_shift, &mm.m_minus, &mm.m_star] {
            prop_assert!(v.iter().all(|&x| x > -1e-10));
        }
    }

    #[test]
    fn single_event_probability_bounded_by_branching(
        r in rates(),
        a in 1usize..10,
        dt in 0.05f64..4.0,
        kind in 0usize..4,
    ) {
        let (b, c) = match kind {
            0 => (a, 0),
            1 => (a, 1),
            2 => (a - 1, 1),
            _ => (a - 1, 0),
        };
        let iv = ReducedInterval::new(a, b, c, dt).unwrap();
        let tm = invert_probabilities(a, dt, &r, N, &opts()).unwrap();
        prop_assert!(fm_transition_prob(&iv, &r) <= tm.get(b, c) * (1.0 + 1e-8) + 1e-12);
    }

    #[test]
    fn event_log_replays_to_observations(r in rates(), k in 0usize..10, seed in any::<u64>()) {
        let init: Genotype = (0..k).map(|i| format!("g{i}")).collect();
        let times = [0.5, 1.0, 2.5];
        let (obs, log) = simulate(500, &r, &init, &times, seed).unwrap();
        let replayed = log.replay(&init, &times).unwrap();
        let observed: Vec<Genotype> = obs.into_iter().map(|o| o.genotype).collect();
        prop_assert_eq!(replayed, observed);
    }

    #[test]
    fn seeded_simulation_is_deterministic(r in rates(), seed in any::<u64>()) {
        let init: Genotype = (0..5).map(|i| format!("g{i}")).collect();
        let one = simulate(500, &r, &init, &[1.0, 2.0], seed).unwrap();
        let two = simulate(500, &r, &init, &[1.0, 2.0], seed).unwrap();
        prop_assert_eq!(one.0, two.0);
    }

    #[test]
    fn coefficients_flatten_round_trip(
        v in prop::collection::vec(-5.0f64..5.0, 3..9),
        split in 0usize..100,
    ) {
        let n = v.len();
        let w0 = 1 + split % (n - 2);
        let w1 = 1 + (split / 7) % (n - w0 - 1);
        let widths = [w0, w1, n - w0 - w1];
        let c = RegressionCoefficients::unflatten(&v, widths).unwrap();
        prop_assert_eq!(c.widths(), widths);
        prop_assert_eq!(c.flatten(), v);
    }
}
