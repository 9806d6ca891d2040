//! Subcommand bodies. Each returns the table/record it produced; writing is left to
//! the caller.

use std::fmt::Write as _;

use killwalk::entropy::{minimize_variational, OptimizerConfig};
use killwalk::env::{make_distribution, sample_environment};
use killwalk::line_solver::{f_limit, green_function_window, two_point_a_with, two_point_e, LimitConfig};
use killwalk::lyapunov::{
    estimate_alpha_ergodic, estimate_alpha_mc, estimate_beta, AlphaConfig, AnnealedConfig, BetaConfig,
};
use killwalk::tree::{
    estimate_alpha_reduced, first_passage_gf, l_recursion_residual, reduce_to_line, sigma_finite_prob, TreeConfig,
};
use killwalk::{Environment, PotentialDistribution};
use serde_json::{json, Value};

use crate::config::{sibling, AlphaMethod, Command, RunConfig};
use crate::error::CliError;

pub struct Output {
    pub csv: String,
    pub json: Value,
    /// Extra files to write, `(path, contents)`.
    pub files: Vec<(std::path::PathBuf, String)>,
    pub summary: String,
}

struct Table {
    text: String,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            text: columns.join(",") + "\n",
        }
    }

    fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }
}

fn distribution(cfg: &RunConfig) -> Result<PotentialDistribution, CliError> {
    make_distribution(&cfg.distribution).map_err(|e| match e {
        killwalk::Error::InvalidDistribution { field, reason } => CliError::Config {
            message: format!("distribution.{field}: {reason}"),
            field: Some(format!("distribution.{field}")),
        },
        other => CliError::Config {
            field: Some("distribution".into()),
            message: other.to_string(),
        },
    })
}

fn alpha_config(cfg: &RunConfig, n_samples: usize) -> AlphaConfig {
    AlphaConfig {
        n_samples,
        tol: cfg.alpha.tol,
        seed: cfg.seed,
        stream_offset: 0,
        r_max: cfg.alpha.r_max,
        step_right_prob: cfg.alpha.step_right_prob,
    }
}

fn beta_config(cfg: &RunConfig) -> BetaConfig {
    BetaConfig {
        n_grid: cfg.beta.n_grid.clone(),
        r_ratio: cfg.beta.r_ratio,
        method: cfg.beta.method,
        seed: cfg.seed,
        n_paths: cfg.beta.n_paths,
        annealed: AnnealedConfig {
            enum_cap: cfg.beta.enum_cap,
            ..AnnealedConfig::default()
        },
    }
}

pub fn run(cfg: &RunConfig) -> Result<Output, CliError> {
    match cfg.command {
        Some(Command::Alpha) => alpha(cfg),
        Some(Command::Beta) => beta(cfg),
        Some(Command::Variational) => variational(cfg),
        Some(Command::TreeReduce) => tree_reduce(cfg),
        Some(Command::Green) => green(cfg),
        Some(Command::Selftest) => selftest(),
        None => Err(CliError::Config {
            field: Some("command".into()),
            message: "no subcommand given on the command line or in the configuration".into(),
        }),
    }
}

fn alpha(cfg: &RunConfig) -> Result<Output, CliError> {
    let dist = distribution(cfg)?;
    let est = match cfg.alpha.method {
        AlphaMethod::Mc => estimate_alpha_mc(&dist, &alpha_config(cfg, cfg.alpha.n_samples))
            .map_err(CliError::run("quenched estimate"))?,
        AlphaMethod::Ergodic => estimate_alpha_ergodic(
            &dist,
            cfg.alpha.n_ergodic,
            cfg.alpha.r_offset,
            cfg.seed,
            cfg.alpha.step_right_prob,
        )
        .map_err(CliError::run("ergodic estimate"))?
        .to_estimate(cfg.seed),
    };
    let mut t = Table::new(&[
        "method",
        "value",
        "ci_halfwidth",
        "std_err",
        "trunc_bias",
        "n_samples",
        "dropped",
        "trivial",
    ]);
    t.row(&[
        est.method().as_str().into(),
        est.value.to_string(),
        est.ci_halfwidth.to_string(),
        est.std_err.to_string(),
        est.trunc_bias.to_string(),
        est.n_samples.to_string(),
        est.dropped.to_string(),
        est.trivial.to_string(),
    ]);
    Ok(Output {
        summary: format!(
            "alpha = {} +- {} (trunc {})",
            est.value, est.ci_halfwidth, est.trunc_bias
        ),
        csv: t.text,
        json: json!({ "command": "alpha", "estimate": est }),
        files: Vec::new(),
    })
}

fn beta(cfg: &RunConfig) -> Result<Output, CliError> {
    let dist = distribution(cfg)?;
    let report = estimate_beta(&dist, &beta_config(cfg)).map_err(CliError::run("annealed estimate"))?;
    let mut t = Table::new(&["n", "b_over_n", "method", "stat_err", "trunc_err"]);
    for g in &report.grid {
        t.row(&[
            g.n.to_string(),
            g.b_over_n.to_string(),
            g.method.as_str().into(),
            g.stat_err.to_string(),
            g.trunc_err.to_string(),
        ]);
    }
    let est = &report.estimate;
    t.row(&[
        "extrapolated".into(),
        est.value.to_string(),
        est.method().as_str().into(),
        est.std_err.to_string(),
        est.trunc_bias.to_string(),
    ]);
    Ok(Output {
        summary: format!(
            "beta = {} +- {} (min over grid {})",
            est.value, est.ci_halfwidth, report.min_upper_bound
        ),
        csv: t.text,
        json: json!({ "command": "beta", "report": report }),
        files: Vec::new(),
    })
}

fn variational(cfg: &RunConfig) -> Result<Output, CliError> {
    let dist = distribution(cfg)?;
    let v = &cfg.variational;
    let theta_range = match (v.theta_min, v.theta_max) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => {
            return Err(CliError::Config {
                field: Some("variational.theta_min".into()),
                message: "theta_min and theta_max must be given together".into(),
            })
        }
    };
    let opt = OptimizerConfig {
        theta_range,
        min_atom_weight: v.min_atom_weight,
        grid_points: v.grid_points,
        param_tol: v.param_tol,
        max_evals: v.max_evals,
        alpha: alpha_config(cfg, v.n_samples),
    };
    let alpha = estimate_alpha_mc(&dist, &opt.alpha).map_err(CliError::run("quenched estimate"))?;
    let beta = estimate_beta(&dist, &beta_config(cfg)).map_err(CliError::run("annealed estimate"))?;
    let rep = minimize_variational(&dist, v.family, &opt, &alpha, &beta.estimate)
        .map_err(CliError::run("variational minimization"))?;
    let mut t = Table::new(&["theta", "E_Q_F", "kl_per_site", "objective"]);
    for p in &rep.objective_curve {
        t.row(&[
            p.theta.to_string(),
            p.e_q_f.to_string(),
            p.kl_per_site.to_string(),
            p.objective.to_string(),
        ]);
    }
    let json = json!({
        "command": "variational",
        "alpha_hat": rep.alpha_hat,
        "beta_hat": rep.beta_hat,
        "beta_grid": beta.grid,
        "var_min_value": rep.var_min_value,
        "var_min_err": rep.var_min_err,
        "var_min_tilt": {
            "family": rep.var_min_tilt.family(),
            "marginal": rep.var_min_tilt.tilt().to_spec(),
        },
        "lower_bound": rep.lower_bound(),
        "upper_bound": rep.upper_bound(),
        "sandwich_holds": rep.sandwich_holds(),
        "gap": rep.gap(),
        "converged": rep.converged,
        "evaluations": rep.evaluations,
        "objective_curve": rep.objective_curve,
    });
    Ok(Output {
        summary: format!(
            "beta {} <= min {} <= alpha {}: {}",
            rep.beta_hat.value,
            rep.var_min_value,
            rep.alpha_hat.value,
            if rep.sandwich_holds() { "holds" } else { "VIOLATED" }
        ),
        csv: t.text,
        json,
        files: Vec::new(),
    })
}

fn tree_reduce(cfg: &RunConfig) -> Result<Output, CliError> {
    let dist = distribution(cfg)?;
    let tp = &cfg.tree;
    let tree = match tp.drift_p {
        Some(p) => TreeConfig::new(tp.d, p, tp.depth_cap),
        None => TreeConfig::symmetric(tp.d, tp.depth_cap),
    }
    .map_err(|e| CliError::Config {
        field: Some("tree".into()),
        message: e.to_string(),
    })?;
    let red = reduce_to_line(&tree, &dist, tp.window_lo, tp.window_hi, cfg.seed, 0)
        .map_err(CliError::run("tree reduction"))?;
    let reduced = if tp.n_samples >= 2 {
        Some(
            estimate_alpha_reduced(&tree, &dist, tp.n_samples, cfg.seed, tp.tol)
                .map_err(CliError::run("reduced quenched estimate"))?,
        )
    } else {
        None
    };
    let mut t = Table::new(&["site", "rho_lower", "rho_upper", "rho_mid", "h_lower", "h_upper"]);
    for r in &red.rho {
        t.row(&[
            r.site_index.to_string(),
            r.rho_lower.to_string(),
            r.rho_upper.to_string(),
            r.midpoint().to_string(),
            r.h_bracket.lower.to_string(),
            r.h_bracket.upper.to_string(),
        ]);
    }
    let env_path = tp
        .env_out
        .clone()
        .or_else(|| cfg.out.as_ref().map(|o| sibling(o, ".env.json")));
    let env_text = serde_json::to_string_pretty(&red.env).expect("environment serializes");
    let mut summary = format!(
        "rho on [{}, {}], step_right_prob {}, max half-width {:e}",
        tp.window_lo, tp.window_hi, red.step_right_prob, red.max_half_width
    );
    if let Some(a) = &reduced {
        let _ = write!(
            summary,
            "; reduced alpha = {} +- {} (systematic {:e})",
            a.estimate.value, a.estimate.ci_halfwidth, a.systematic
        );
    }
    Ok(Output {
        summary,
        csv: t.text,
        json: json!({
            "command": "tree-reduce",
            "tree": tree,
            "step_right_prob": red.step_right_prob,
            "max_half_width": red.max_half_width,
            "rho": red.rho,
            "environment": red.env,
            "reduced_alpha": reduced.as_ref().map(|a| json!({
                "estimate": a.estimate,
                "systematic": a.systematic,
            })),
        }),
        files: env_path.map(|p| (p, env_text)).into_iter().collect(),
    })
}

fn green(cfg: &RunConfig) -> Result<Output, CliError> {
    let gp = &cfg.green;
    let env: Environment = match &gp.env {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::Config {
                field: Some("green.env".into()),
                message: format!("{}: {e}", path.display()),
            })?
        }
        None => {
            let dist = distribution(cfg)?;
            sample_environment(&dist, gp.window_lo, gp.window_hi, cfg.seed, 0)
                .map_err(CliError::run("environment sampling"))?
        }
    };
    let (r, big_r) = (env.window_lo, env.window_hi);
    let mut t = Table::new(&["n", "green", "neg_ln_green", "a_window", "ratio"]);
    let mut rows = Vec::new();
    for &n in &gp.distances {
        let y = gp.x + n;
        let g = green_function_window(&env, gp.x, y, r, big_r, gp.step_right_prob)
            .map_err(CliError::run(format!("green function at distance {n}")))?;
        let a = two_point_a_with(&env, gp.x, y, r, gp.step_right_prob)
            .map_err(CliError::run(format!("two-point function at distance {n}")))?;
        let neg_ln = -g.ln();
        let ratio = neg_ln / a;
        t.row(&[
            n.to_string(),
            g.to_string(),
            neg_ln.to_string(),
            a.to_string(),
            ratio.to_string(),
        ]);
        rows.push(json!({ "n": n, "green": g, "neg_ln_green": neg_ln, "a_window": a, "ratio": ratio }));
    }
    Ok(Output {
        summary: format!("green ratio curve on [{r}, {big_r}] for {} distances", rows.len()),
        csv: t.text,
        json: json!({ "command": "green", "window": [r, big_r], "rows": rows }),
        files: Vec::new(),
    })
}

struct Check {
    name: String,
    expected: f64,
    got: f64,
    tol: f64,
}

fn selftest() -> Result<Output, CliError> {
    let mut checks = Vec::new();
    let mut push = |name: String, expected: f64, got: f64, tol: f64| {
        checks.push(Check {
            name,
            expected,
            got,
            tol,
        })
    };
    push("L(1) d=3".into(), 0.8, sigma_finite_prob(3), 1e-12);
    push("L(1) d=4".into(), 0.6, sigma_finite_prob(4), 1e-12);
    for d in 3..=10u32 {
        push(
            format!("F(1) d={d}"),
            1.0 / f64::from(d - 1),
            first_passage_gf(d, 1.0),
            1e-12,
        );
        push(
            format!("L recursion residual d={d}"),
            0.0,
            l_recursion_residual(d),
            1e-12,
        );
    }
    for r in [-1i64, -4, -9] {
        let env = Environment::constant(r, 1, 0.0).map_err(CliError::run("selftest environment"))?;
        let e = two_point_e(&env, 0, 1, r).map_err(CliError::run("gambler's ruin"))?;
        push(
            format!("gambler's ruin r={r}"),
            -(r as f64) / (1.0 - r as f64),
            e,
            1e-12,
        );
    }
    let lambda = -(0.8f64.ln());
    let dist = PotentialDistribution::point_mass(lambda).map_err(CliError::run("selftest law"))?;
    let field = killwalk::env::SampledField::new(dist, 0, 0);
    let f = f_limit(&field, &LimitConfig::default()).map_err(CliError::run("constant potential"))?;
    push("constant potential F = ln 2".into(), 2f64.ln(), f.a_value, 1e-9);

    let mut t = Table::new(&["check", "expected", "got", "abs_err", "tol", "pass"]);
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for c in &checks {
        let err = (c.got - c.expected).abs();
        let pass = err <= c.tol * c.expected.abs().max(1.0);
        if !pass {
            failed.push(c.name.clone());
        }
        t.row(&[
            c.name.clone(),
            c.expected.to_string(),
            c.got.to_string(),
            err.to_string(),
            c.tol.to_string(),
            pass.to_string(),
        ]);
        rows.push(json!({ "check": c.name, "expected": c.expected, "got": c.got, "abs_err": err, "pass": pass }));
    }
    if !failed.is_empty() {
        return Err(CliError::Selftest(failed.join("; ")));
    }
    Ok(Output {
        summary: format!("selftest: {} checks passed", checks.len()),
        csv: t.text,
        json: json!({ "command": "selftest", "checks": rows }),
        files: Vec::new(),
    })
}
