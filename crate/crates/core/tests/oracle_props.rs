mod common;

use common::{brute_force_max, random_landscape, rng};
use dale_core::lambda_oracle::{
    default_gamma_sweep, expected_loss, lambda_star, oversmoothed_lambda, solve_mu, MU_TOLERANCE,
};
use proptest::prelude::*;
use rand::Rng;

fn landscape() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (proptest::collection::vec(0.0f64..10.0, 2..40), 0.01f64..2.0)
}

proptest! {
    #[test]
    fn expected_loss_between_mean_and_max((values, vol) in landscape(), log_gamma in -4.0f64..2.0) {
        let total = vol * values.len() as f64;
        let gamma = 10f64.powf(log_gamma) * total;
        let d = lambda_star(&values, vol, gamma).unwrap();
        let e = expected_loss(&d, &values).unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(e >= mean - 1e-9 * max.max(1.0));
        prop_assert!(e <= max + 1e-9 * max.max(1.0));
        prop_assert!((d.total_mass() - 1.0).abs() <= 1e-8);
        prop_assert!(d.density.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn residual_within_tolerance((values, vol) in landscape(), log_gamma in -6.0f64..3.0) {
        let gamma = 10f64.powf(log_gamma);
        let mu = solve_mu(&values, vol, gamma).unwrap();
        let mass: f64 = values.iter().map(|v| (v - mu).max(0.0)).sum::<f64>() * vol;
        prop_assert!((mass - gamma).abs() <= MU_TOLERANCE * gamma.max(1.0));
    }

    #[test]
    fn oversmoothed_is_normalized((values, vol) in landscape()) {
        prop_assume!(values.iter().sum::<f64>() > 0.0);
        let d = oversmoothed_lambda(&values, vol).unwrap();
        prop_assert!((d.total_mass() - 1.0).abs() <= 1e-8);
    }
}

#[test]
fn expected_loss_nonincreasing_in_gamma() {
    let mut r = rng(31);
    for _ in 0..50 {
        let n = r.random_range(5..60);
        let vol = r.random_range(0.01..1.0);
        let values = random_landscape(&mut r, n);
        let total = vol * n as f64;
        let mut sweep = default_gamma_sweep(total);
        sweep.insert(0, 1e-6 * total);
        let losses: Vec<f64> = sweep
            .iter()
            .map(|&g| expected_loss(&lambda_star(&values, vol, g).unwrap(), &values).unwrap())
            .collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{losses:?}");
        }
    }
}

#[test]
fn matches_brute_force_maximizer() {
    let mut r = rng(32);
    for _ in 0..50 {
        let n = r.random_range(2..11);
        let vol = r.random_range(0.05..1.0);
        let values = random_landscape(&mut r, n);
        let total = vol * n as f64;
        let gamma = 10f64.powf(r.random_range(-3.0..1.0)) * total;
        let d = lambda_star(&values, vol, gamma).unwrap();
        let c: f64 = d.density.iter().map(|p| p * p).sum::<f64>() * vol;
        let brute = brute_force_max(&values, vol, c);
        let e = expected_loss(&d, &values).unwrap();
        assert!((brute - e).abs() <= 1e-6, "brute {brute} vs {e}");
    }
}

#[test]
fn atomic_limit() {
    let mut r = rng(33);
    for _ in 0..50 {
        let n = r.random_range(2..60);
        let vol = r.random_range(0.01..1.0);
        let values = random_landscape(&mut r, n);
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        let d = lambda_star(&values, vol, 1e-6 * vol * n as f64).unwrap();
        assert!(expected_loss(&d, &values).unwrap() >= max - 1e-3 * (max - min));
    }
}
