use killwalk::lyapunov::{
    annealed_exact_enum, annealed_localtime_mc, estimate_alpha_ergodic, estimate_alpha_mc, estimate_beta, AlphaConfig,
    AnnealedConfig, BetaConfig,
};
use killwalk::PotentialDistribution;

fn bern() -> PotentialDistribution {
    PotentialDistribution::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap()
}

#[test]
fn sample_mean_and_ergodic_average_agree() {
    let mc = estimate_alpha_mc(
        &bern(),
        &AlphaConfig {
            n_samples: 10_000,
            seed: 21,
            ..AlphaConfig::default()
        },
    )
    .unwrap();
    let erg = estimate_alpha_ergodic(&bern(), 10_000, 64, 22, 0.5).unwrap();
    let combined = (mc.std_err.powi(2) + erg.std_err.powi(2)).sqrt();
    assert!(
        (mc.value - erg.final_ratio()).abs() < 3.0 * combined,
        "{} vs {} (se {combined})",
        mc.value,
        erg.final_ratio()
    );
}

#[test]
fn disjoint_seed_ranges_agree() {
    let run = |offset| {
        estimate_alpha_mc(
            &bern(),
            &AlphaConfig {
                n_samples: 4000,
                stream_offset: offset,
                ..AlphaConfig::default()
            },
        )
        .unwrap()
    };
    let (a, b) = (run(0), run(1 << 32));
    assert!((a.value - b.value).abs() < a.ci_halfwidth + b.ci_halfwidth);
}

#[test]
fn norm_property_along_one_environment() {
    let run = estimate_alpha_ergodic(&bern(), 20_000, 64, 5, 0.5).unwrap();
    let at = |k: usize| run.ratios[k - 1].1;
    assert!((at(10_000) - at(20_000)).abs() < 3.0 * run.std_err * 2f64.sqrt());
}

#[test]
fn enumeration_and_localtime_agree() {
    for &(n, r) in &[(2i64, -8i64), (4, -8), (8, -5)] {
        assert!(n - r - 1 <= 14);
        let exact = annealed_exact_enum(&bern(), n, r, &AnnealedConfig::default()).unwrap();
        let mc = annealed_localtime_mc(&bern(), n, r, 100_000, 9, 0.5).unwrap();
        assert!(
            (exact.f_r - mc.f_mean).abs() < 4.0 * mc.f_std_err,
            "n={n}: {} vs {} +- {}",
            exact.f_r,
            mc.f_mean,
            mc.f_std_err
        );
    }
}

#[test]
fn enumerated_ratios_decrease() {
    let cfg = AnnealedConfig::default();
    let vals: Vec<f64> = [1i64, 2, 4]
        .iter()
        .map(|&n| {
            let e = annealed_exact_enum(&bern(), n, -3 * n - 2, &cfg).unwrap();
            assert!(e.b_r <= e.mean_a + 1e-12);
            e.b_r / n as f64
        })
        .collect();
    assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
}

#[test]
fn annealed_below_quenched() {
    let beta = estimate_beta(&bern(), &BetaConfig::default()).unwrap();
    let alpha = estimate_alpha_mc(
        &bern(),
        &AlphaConfig {
            n_samples: 4000,
            ..AlphaConfig::default()
        },
    )
    .unwrap();
    assert!(beta.estimate.value <= alpha.value + alpha.error_budget() + beta.estimate.error_budget());
    assert!(beta.min_upper_bound >= beta.estimate.value - beta.estimate.error_budget());
}
