use killwalk::env::WindowView;
use killwalk::line_solver::{f_r, step_increments, two_point_a, two_point_e};
use killwalk::lyapunov::{enumerate_expectations, enumerate_product};
use killwalk::{Environment, PotentialDistribution};
use proptest::prelude::*;

fn window() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..3.0f64], 24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn additivity_with_shared_barrier(values in window(), r in -12i64..-1, y in 0i64..6, z in 6i64..11) {
        let env = Environment::from_values(-12, values).unwrap();
        let a_xz = two_point_a(&env, 0, z, r).unwrap();
        let a_xy = two_point_a(&env, 0, y, r).unwrap();
        let a_yz = two_point_a(&env, y, z, r).unwrap();
        prop_assert!((a_xz - a_xy - a_yz).abs() <= 1e-12 * a_xz.max(1.0));
        let e = two_point_e(&env, 0, z, r).unwrap();
        let prod = two_point_e(&env, 0, y, r).unwrap() * two_point_e(&env, y, z, r).unwrap();
        prop_assert!((e - prod).abs() <= 1e-12 * e.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn barrier_monotone_and_envelope(values in window(), r in -11i64..-1) {
        let env = Environment::from_values(-12, values).unwrap();
        let near = f_r(&env, r).unwrap().a_value;
        let far = f_r(&env, r - 1).unwrap().a_value;
        prop_assert!(far <= near + 1e-15);
        prop_assert!(far >= 0.0);
        prop_assert!(near <= env.get(0).unwrap() + 2f64.ln() + 1e-15);
    }

    #[test]
    fn a_is_monotone_in_each_site(values in window(), site in -5i64..4, bump in 0.0..2.0f64) {
        let env = Environment::from_values(-12, values.clone()).unwrap();
        let mut raised = values;
        raised[(site + 12) as usize] += bump;
        let env2 = Environment::from_values(-12, raised).unwrap();
        let a = two_point_a(&env, 0, 4, -6).unwrap();
        let a2 = two_point_a(&env2, 0, 4, -6).unwrap();
        prop_assert!(a2 >= a - 1e-15);
    }
}

fn sweep_a(values: &[f64], lo: i64, r: i64, x: i64, y: i64) -> f64 {
    let view = WindowView { lo, values };
    step_increments(&view, r, x, y, 0.5).unwrap().iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn jensen_under_enumeration(q in 0.05..0.95f64, big in 0.1..4.0f64, n in 1i64..4) {
        let dist = PotentialDistribution::finite(&[(0.0, q), (big, 1.0 - q)]).unwrap();
        let r = -4;
        let sites = (n - r - 1) as usize;
        let [f, mean_a] = enumerate_expectations(&dist, sites, 1 << 20, |v| {
            let a = sweep_a(v, r + 1, r, 0, n);
            [(-a).exp(), a]
        }).unwrap();
        prop_assert!(-f.ln() <= mean_a + 1e-12);
    }

    #[test]
    fn fkg_supermultiplicativity(q in 0.05..0.95f64, big in 0.1..4.0f64, n in 1i64..4, m in 1i64..4) {
        let dist = PotentialDistribution::finite(&[(0.0, q), (big, 1.0 - q)]).unwrap();
        let atoms = dist.atoms().unwrap();
        let r = -3;
        let laws = vec![atoms; (n + m - r - 1) as usize];
        let [joint, left, right] = enumerate_product(&laws, 1 << 20, |v| {
            let e1 = (-sweep_a(v, r + 1, r, 0, n)).exp();
            let e2 = (-sweep_a(v, r + 1, r, n, n + m)).exp();
            [e1 * e2, e1, e2]
        }).unwrap();
        prop_assert!(joint >= left * right - 1e-12);
    }
}
