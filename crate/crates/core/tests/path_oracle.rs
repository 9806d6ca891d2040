//! Tridiagonal sweep against direct summation over killed paths.

use approx::assert_relative_eq;
use killwalk::env::sample_environment;
use killwalk::line_solver::{green_function_window, two_point_a_with, two_point_e};
use killwalk::{Environment, PotentialDistribution};

/// Sums the weights of all paths of length at most `len` from `x` that hit `y`
/// before `r` (exclusive walls at `r` and `y`), by propagating the mass vector one
/// step at a time. Returns the sum and the mass still alive inside the window,
/// which bounds every longer path's contribution.
fn path_sum(env: &Environment, x: i64, y: i64, r: i64, p: f64, len: usize) -> (f64, f64) {
    let width = (y - r - 1) as usize;
    let mut mass = vec![0.0; width];
    mass[(x - r - 1) as usize] = 1.0;
    let mut hit = 0.0;
    for _ in 0..len {
        let mut next = vec![0.0; width];
        for (i, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let site = r + 1 + i as i64;
            let w = m * (-env.get(site).unwrap()).exp();
            if site + 1 == y {
                hit += w * p;
            } else {
                next[i + 1] += w * p;
            }
            if site - 1 > r {
                next[i - 1] += w * (1.0 - p);
            }
        }
        mass = next;
    }
    (hit, mass.iter().sum())
}

#[test]
fn sweep_matches_paths_of_length_30() {
    let dist = PotentialDistribution::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap();
    for seed in 0..40 {
        let env = sample_environment(&dist, -12, 12, seed, 0).unwrap();
        for &(x, y, r) in &[(0, 1, -11), (0, 5, -6), (-3, 8, -4), (2, 3, 1)] {
            let e = two_point_e(&env, x, y, r).unwrap();
            let (sum, tail) = path_sum(&env, x, y, r, 0.5, 30);
            assert!(sum <= e + 1e-15);
            assert!(e - sum <= tail + 1e-15, "seed {seed} {x}->{y}: {e} vs {sum} + {tail}");
        }
    }
}

#[test]
fn sweep_matches_long_path_sums() {
    let dist = PotentialDistribution::finite(&[(0.1, 0.5), (1.0, 0.5)]).unwrap();
    for seed in 0..10 {
        let env = sample_environment(&dist, -12, 12, seed, 1).unwrap();
        for p in [0.5, 0.3, 0.8] {
            let a = two_point_a_with(&env, 0, 4, -7, p).unwrap();
            let (sum, tail) = path_sum(&env, 0, 4, -7, p, 3000);
            assert!(tail < 1e-14);
            assert_relative_eq!((-a).exp(), sum, max_relative = 1e-10);
        }
    }
}

#[test]
fn two_site_hand_computation() {
    // n = 1, r = -1: sites 0 only; e = p e^{-w0} summed over loops that cannot exist.
    let env = Environment::from_values(-1, vec![0.0, 0.7, 0.0]).unwrap();
    let e = two_point_e(&env, 0, 1, -1).unwrap();
    assert_relative_eq!(e, 0.5 * (-0.7f64).exp(), max_relative = 1e-14);
    // r = -2: sites -1, 0. u0 = w0 (p + q u_{-1}), u_{-1} = w_{-1} p u0.
    let env = Environment::from_values(-2, vec![0.0, 0.3, 0.7, 0.0]).unwrap();
    let (w1, w0) = ((-0.3f64).exp(), (-0.7f64).exp());
    let expect = 0.5 * w0 / (1.0 - 0.25 * w0 * w1);
    assert_relative_eq!(two_point_e(&env, 0, 1, -2).unwrap(), expect, max_relative = 1e-14);
}

/// Green function as a sum over paths of positive length, `m >= 1`.
fn green_paths(env: &Environment, x: i64, y: i64, r: i64, big_r: i64, len: usize) -> f64 {
    let width = (big_r - r - 1) as usize;
    let idx = |s: i64| (s - r - 1) as usize;
    let mut mass = vec![0.0; width];
    mass[idx(x)] = 1.0;
    let mut g = 0.0;
    for _ in 0..len {
        let mut next = vec![0.0; width];
        for (i, &m) in mass.iter().enumerate() {
            let site = r + 1 + i as i64;
            let w = m * (-env.get(site).unwrap()).exp() * 0.5;
            if i + 1 < width {
                next[i + 1] += w;
            }
            if i > 0 {
                next[i - 1] += w;
            }
        }
        mass = next;
        g += mass[idx(y)] * (-env.get(y).unwrap()).exp();
    }
    g
}

#[test]
fn green_function_matches_path_sum() {
    let dist = PotentialDistribution::finite(&[(0.2, 0.5), (1.0, 0.5)]).unwrap();
    let env = sample_environment(&dist, -10, 10, 4, 0).unwrap();
    for &(x, y) in &[(0, 0), (0, 3), (2, -4)] {
        let g = green_function_window(&env, x, y, -10, 10, 0.5).unwrap();
        let direct = green_paths(&env, x, y, -10, 10, 4000);
        assert_relative_eq!(g, direct, max_relative = 1e-10);
    }
}
