use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpcx::smooth::{lse_combine, lse_combine_parallel, lse_gradient, sandwich_check, BallConstraints};

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..=64)
}

fn beta() -> impl Strategy<Value = f64> {
    (0.0f64..3.0).prop_map(|e| 10f64.powf(e))
}

#[test]
fn three_value_sandwich() {
    let s = sandwich_check(&[0.0, -1.0, -2.0], 10.0).unwrap();
    assert!(s.holds);
    assert!(s.scaled >= 0.0 && s.scaled <= 3f64.ln() / 10.0);
    let direct = (1.0 + (-10.0f64).exp() + (-20.0f64).exp()).ln();
    assert!((lse_combine(&[0.0, -1.0, -2.0], 10.0).unwrap() - direct).abs() <= 1e-15);
}

#[test]
fn random_five_member_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..50 {
        let dim = rng.random_range(1..=4);
        let set = BallConstraints::sample(&mut rng, 5, dim);
        let beta = rng.random_range(0.5..5.0);
        let x = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let g = lse_gradient(&set.values(&x), &set.gradients(&x), beta).unwrap();
        let h = 1e-6;
        for i in 0..dim {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (lse_combine(&set.values(&xp), beta).unwrap() - lse_combine(&set.values(&xm), beta).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "fd {fd} analytic {}", g[i]);
        }
    }
}

#[test]
fn negative_values_become_feasible_for_large_beta() {
    let values = [-0.3, -0.05, -1.0, -0.2];
    // log(M)/β < 0.05 once β > log(4)/0.05.
    let beta_star = 4f64.ln() / 0.05;
    for k in 0..20 {
        let beta = beta_star * 1.5f64.powi(k);
        assert!(lse_combine(&values, beta).unwrap() <= 0.0);
    }
    assert!(lse_combine(&values, 1.0).unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sandwich_holds(v in values(), b in beta()) {
        prop_assert!(sandwich_check(&v, b).unwrap().holds);
    }

    #[test]
    fn doubling_beta_halves_the_gap(v in values(), b in beta()) {
        let g1 = sandwich_check(&v, b).unwrap().gap();
        let g2 = sandwich_check(&v, 2.0 * b).unwrap().gap();
        prop_assert!(g2 <= 0.5 * g1 + 1e-15);
    }

    #[test]
    fn translation_identity(v in values(), b in beta(), c in prop::sample::select(vec![-1e3, -7.5, 0.25, 40.0, 900.0])) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let lhs = lse_combine(&shifted, b).unwrap();
        let rhs = lse_combine(&v, b).unwrap() + b * c;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn combined_feasible_points_satisfy_every_member(seed in any::<u64>(), members in 1usize..12, dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = BallConstraints::sample(&mut rng, members, dim);
        let b = rng.random_range(1.0..100.0);
        for _ in 0..50 {
            let x = DVector::from_fn(dim, |_, _| rng.random_range(-1.5..1.5));
            let v = set.values(&x);
            if lse_combine(&v, b).unwrap() <= 0.0 {
                prop_assert!(v.iter().all(|&g| g <= 0.0));
            }
        }
    }

    #[test]
    fn parallel_tree_is_bit_identical(v in prop::collection::vec(-50.0f64..50.0, 1..2000), b in beta()) {
        let serial = lse_combine_parallel(&v, b, 1).unwrap();
        for workers in [2, 3, 8] {
            prop_assert_eq!(serial.to_bits(), lse_combine_parallel(&v, b, workers).unwrap().to_bits());
        }
        let flat = lse_combine(&v, b).unwrap();
        prop_assert!((serial - flat).abs() <= 1e-12 * flat.abs().max(1.0));
    }
}
