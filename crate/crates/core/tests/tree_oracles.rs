use std::collections::HashMap;

use killwalk::line_solver::log_survival_profile;
use killwalk::rng::{substream, KeyedStream};
use killwalk::tree::{
    branch_return_weight, child_key, excursion_survival_h, geodesic_step_prob, reduce_to_line, turning_point_annealed,
    BracketEnd, GeodesicSpec, KeyedVertices, LineShape, RhoField, SiteType, TreeConfig, VertexField,
};
use killwalk::PotentialDistribution;

fn bern() -> PotentialDistribution {
    PotentialDistribution::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap()
}

/// Survival weight of the tree walk from geodesic site 0 until it first reaches
/// geodesic site 1, averaged over `n_paths` trajectories.
fn tree_walk_e(cfg: &TreeConfig, dist: &PotentialDistribution, seed: u64, n_paths: u64) -> (f64, f64) {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let mut fields: HashMap<i64, KeyedVertices> = HashMap::new();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for path in 0..n_paths {
        let mut rng = KeyedStream::new(99, substream(7, path)).sequential();
        let mut g = 0i64;
        let mut stack: Vec<u64> = Vec::new();
        let mut log_w = 0.0f64;
        let w = loop {
            if g == 1 && stack.is_empty() {
                break (-log_w).exp();
            }
            if g < -400 || stack.len() > 200 || log_w > 745.0 {
                break 0.0;
            }
            let field = fields
                .entry(g)
                .or_insert_with(|| KeyedVertices::for_site(dist, seed, 0, g));
            let key = stack.last().copied().unwrap_or(0);
            log_w += field.omega(key);
            let u = rng.next_f64();
            if stack.is_empty() {
                if u < p {
                    g += 1;
                } else if u < p + c {
                    g -= 1;
                } else {
                    let j = (((u - p - c) / c) as u32).min(cfg.d - 3);
                    stack.push(child_key(0, j));
                }
            } else if u < p {
                stack.pop();
            } else {
                let j = (((u - p) / c) as u32).min(cfg.d - 2);
                stack.push(child_key(key, j));
            }
        };
        sum += w;
        sum_sq += w * w;
    }
    let n = n_paths as f64;
    let mean = sum / n;
    (mean, ((sum_sq / n - mean * mean) / (n - 1.0)).sqrt())
}

fn line_e_bracket(cfg: &TreeConfig, dist: &PotentialDistribution, seed: u64) -> (f64, f64) {
    let p = geodesic_step_prob(cfg);
    let mut field = RhoField::new(cfg, dist, seed, 0, LineShape::Uphill).unwrap();
    field.set_end(BracketEnd::Upper);
    let lo = log_survival_profile(&field, -120, 0, 1, |_| p).unwrap();
    field.set_end(BracketEnd::Lower);
    let hi = log_survival_profile(&field, -120, 0, 1, |_| p).unwrap();
    ((-lo).exp(), (-hi).exp())
}

#[test]
fn zero_potential_tree_walk_matches_line() {
    let d0 = PotentialDistribution::point_mass(0.0).unwrap();
    let cfg = TreeConfig::symmetric(3, 60).unwrap();
    let (lo, hi) = line_e_bracket(&cfg, &d0, 1);
    assert!((lo - 0.5).abs() < 1e-9 && (hi - 0.5).abs() < 1e-9);
    let (mc, se) = tree_walk_e(&cfg, &d0, 1, 20_000);
    assert!((mc - 0.5).abs() < 4.0 * se, "{mc} +- {se}");
}

#[test]
fn bernoulli_tree_walk_matches_line() {
    for cfg in [
        TreeConfig::symmetric(3, 8).unwrap(),
        TreeConfig::new(3, 0.5, 8).unwrap(),
    ] {
        for seed in [4u64, 5] {
            let (lo, hi) = line_e_bracket(&cfg, &bern(), seed);
            let (mc, se) = tree_walk_e(&cfg, &bern(), seed, 20_000);
            assert!(
                mc >= lo - 4.0 * se && mc <= hi + 4.0 * se,
                "{cfg:?} seed {seed}: {mc} +- {se} vs [{lo}, {hi}]"
            );
        }
    }
}

#[test]
fn brackets_nest_as_depth_grows() {
    for site in 0..5 {
        let field = KeyedVertices::for_site(&bern(), 8, 0, site);
        let mut prev: Option<(f64, f64)> = None;
        for depth in 2..=12 {
            let cfg = TreeConfig::symmetric(3, depth).unwrap();
            let w = branch_return_weight(&cfg, &field, child_key(0, 0)).unwrap();
            assert!(0.0 <= w.lower && w.lower <= w.upper && w.upper <= 1.0);
            if let Some((lo, hi)) = prev {
                assert!(lo <= w.lower && w.upper <= hi, "depth {depth}");
            }
            prev = Some((w.lower, w.upper));
        }
    }
}

#[test]
fn bracket_width_decays() {
    let field = KeyedVertices::for_site(&bern(), 2, 0, 0);
    let width = |d| {
        excursion_survival_h(&TreeConfig::symmetric(3, d).unwrap(), &field, SiteType::Monotone)
            .unwrap()
            .width()
    };
    assert!(width(8) / width(4) < 1.0);
    assert!(width(8) > 0.0);
}

#[test]
fn reduced_environment_round_trips() {
    let cfg = TreeConfig::symmetric(3, 6).unwrap();
    let red = reduce_to_line(&cfg, &bern(), -5, 5, 3, 0).unwrap();
    let json = serde_json::to_string(&red.env).unwrap();
    let back: killwalk::Environment = serde_json::from_str(&json).unwrap();
    assert_eq!(back, red.env);
    assert!(red
        .rho
        .iter()
        .all(|r| r.rho_lower <= r.midpoint() && r.midpoint() <= r.rho_upper));
}

#[test]
fn turning_point_annealed_orderings() {
    for cfg in [
        TreeConfig::symmetric(3, 1).unwrap(),
        TreeConfig::new(3, 0.6, 1).unwrap(),
    ] {
        for k in [1i64, 2] {
            let spec = GeodesicSpec::turning(k, 0, 3);
            let an = turning_point_annealed(&spec, &cfg, &bern(), -2, 1 << 22).unwrap();
            assert!(an.lower_holds && an.upper_holds, "{an:?}");
            assert!(an.b_total >= an.b_tail);
        }
    }
}
