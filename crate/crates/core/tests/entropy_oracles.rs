use approx::assert_relative_eq;
use killwalk::entropy::{
    expected_f_under, kl_divergence, minimize_variational, specific_entropy_product, FamilyChoice, OptimizerConfig,
    TiltedProductMeasure,
};
use killwalk::lyapunov::{estimate_alpha_mc, AlphaConfig};
use killwalk::PotentialDistribution;

fn bern() -> PotentialDistribution {
    PotentialDistribution::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap()
}

/// `H_I(Q|P)` by summing over every configuration of the window.
fn window_entropy(q: &[(f64, f64)], p: &[(f64, f64)], sites: u32) -> f64 {
    let m = q.len();
    (0..m.pow(sites))
        .map(|mut idx| {
            let (mut qw, mut pw) = (1.0, 1.0);
            for _ in 0..sites {
                qw *= q[idx % m].1;
                pw *= p[idx % m].1;
                idx /= m;
            }
            if qw == 0.0 {
                0.0
            } else {
                qw * (qw / pw).ln()
            }
        })
        .sum()
}

#[test]
fn window_entropy_is_additive() {
    let p = PotentialDistribution::finite(&[(0.0, 0.2), (0.5, 0.3), (2.0, 0.5)]).unwrap();
    let q = PotentialDistribution::finite(&[(0.0, 0.6), (0.5, 0.1), (2.0, 0.3)]).unwrap();
    let kl = specific_entropy_product(&q, &p).unwrap();
    for sites in [1u32, 2, 4] {
        let h = window_entropy(&q.atoms().unwrap(), &p.atoms().unwrap(), sites);
        assert!((h - f64::from(sites) * kl).abs() < 1e-12);
        assert!((h / f64::from(sites) - kl).abs() < 1e-12);
    }
}

#[test]
fn gibbs_inequality() {
    let p = bern();
    for w in [0.01, 0.2, 0.5, 0.7, 0.99] {
        let q = PotentialDistribution::finite(&[(0.0, w), (1.0, 1.0 - w)]).unwrap();
        let kl = kl_divergence(&q, &p).unwrap();
        assert!(kl >= 0.0);
        assert_eq!(kl == 0.0, w == 0.5);
    }
}

fn small_cfg() -> AlphaConfig {
    AlphaConfig {
        n_samples: 1000,
        seed: 3,
        ..AlphaConfig::default()
    }
}

#[test]
fn point_mass_tilt_hits_closed_form() {
    let q = TiltedProductMeasure::free_simplex(&bern(), &[0.0, 1.0]).unwrap();
    let est = expected_f_under(&q, &small_cfg()).unwrap();
    let w = (-1.0f64).exp();
    let closed = -((1.0 - (1.0 - w * w).sqrt()) / w).ln();
    assert_relative_eq!(est.value, closed, max_relative = 1e-8);
    assert!(est.std_err < 1e-12);
}

#[test]
fn zero_tilt_reproduces_alpha() {
    let q = TiltedProductMeasure::exponential(&bern(), 0.0).unwrap();
    let a = estimate_alpha_mc(&bern(), &small_cfg()).unwrap();
    assert_eq!(expected_f_under(&q, &small_cfg()).unwrap(), a);
}

#[test]
fn heavier_tilt_never_lowers_f() {
    let cfg = AlphaConfig {
        n_samples: 300,
        ..small_cfg()
    };
    let vals: Vec<f64> = [2.0, 1.0, 0.0, -1.0, -2.0]
        .iter()
        .map(|&t| {
            let q = TiltedProductMeasure::exponential(&bern(), t).unwrap();
            expected_f_under(&q, &cfg).unwrap().value
        })
        .collect();
    assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{vals:?}");
}

#[test]
fn deterministic_law_collapses() {
    let lambda = -(0.8f64.ln());
    let dist = PotentialDistribution::point_mass(lambda).unwrap();
    let cfg = OptimizerConfig::default();
    let alpha = estimate_alpha_mc(&dist, &cfg.alpha).unwrap();
    let rep = minimize_variational(&dist, FamilyChoice::ExponentialTilt, &cfg, &alpha, &alpha).unwrap();
    assert_eq!(rep.objective_curve.len(), 1);
    assert_relative_eq!(rep.var_min_value, 2f64.ln(), max_relative = 1e-8);
    assert!(rep.converged);
}

#[test]
fn curve_is_coercive_and_smooth() {
    let cfg = OptimizerConfig {
        grid_points: 11,
        alpha: AlphaConfig {
            n_samples: 1000,
            ..AlphaConfig::default()
        },
        ..OptimizerConfig::default()
    };
    let alpha = estimate_alpha_mc(&bern(), &cfg.alpha).unwrap();
    let mut loose = alpha.clone();
    loose.value = 0.0;
    let rep = minimize_variational(&bern(), FamilyChoice::ExponentialTilt, &cfg, &alpha, &loose).unwrap();
    let at_zero = rep.objective_curve.iter().find(|p| p.theta == 0.0).unwrap();
    assert_eq!(at_zero.objective, alpha.value);
    assert!(rep.var_min_value <= alpha.value);
    let theta_min = rep.var_min_tilt.theta().unwrap();
    let left: Vec<_> = rep.objective_curve.iter().filter(|p| p.theta <= theta_min).collect();
    for w in left.windows(2) {
        let eps = w[0].e_q_f_ci.max(w[1].e_q_f_ci);
        assert!(w[0].objective >= w[1].objective - 2.0 * eps, "{w:?}");
    }
    let first = rep.objective_curve.first().unwrap();
    assert!(first.objective > alpha.value);
}
