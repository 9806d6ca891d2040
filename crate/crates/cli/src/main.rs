//! `killwalk`: command-line driver for the killed-walk exponents.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use killwalk::entropy::FamilyChoice;
use killwalk::env::DistributionSpec;
use killwalk::lyapunov::BetaMethod;

use config::{sibling, AlphaMethod, Command, Format, Manifest, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "killwalk",
    version,
    about = "Killed random walk exponents in random potentials"
)]
struct Cli {
    /// JSON run configuration or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Output file; stdout when absent. The manifest goes to `<out>.manifest.json`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Potential law as JSON, e.g. '{"kind":"finite","atoms":[[0,0.5],[1,0.5]]}'.
    #[arg(long, global = true)]
    dist: Option<String>,
    #[command(subcommand)]
    command: Option<Sub>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Quenched exponent.
    Alpha(AlphaArgs),
    /// Annealed exponent.
    Beta(BetaArgs),
    /// Minimize E_Q F + KL(Q|P) over product measures.
    Variational(VariationalArgs),
    /// Reduce the tree walk to a line potential.
    TreeReduce(TreeArgs),
    /// Green function against the two-point exponent.
    Green(GreenArgs),
    /// Closed-form consistency checks.
    Selftest,
}

#[derive(Args, Debug)]
struct AlphaArgs {
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<AlphaMethod>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BetaMethodArg {
    Auto,
    Enum,
    LocaltimeMc,
}

#[derive(Args, Debug)]
struct BetaArgs {
    /// Comma-separated distances.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<i64>>,
    #[arg(long)]
    r_ratio: Option<f64>,
    #[arg(long, value_enum)]
    method: Option<BetaMethodArg>,
    #[arg(long)]
    n_paths: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    ExponentialTilt,
    FreeSimplex,
}

#[derive(Args, Debug)]
struct VariationalArgs {
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct TreeArgs {
    #[arg(long)]
    d: Option<u32>,
    #[arg(long)]
    drift_p: Option<f64>,
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    env_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GreenArgs {
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<i64>>,
}

fn resolve(cli: Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    if let Some(text) = &cli.dist {
        cfg.distribution = config::parse_json::<DistributionSpec>(text, "distribution")?;
    }
    match cli.command {
        None => {}
        Some(Sub::Alpha(a)) => {
            cfg.command = Some(Command::Alpha);
            set(&mut cfg.alpha.n_samples, a.n_samples);
            set(&mut cfg.alpha.method, a.method);
            set(&mut cfg.alpha.tol, a.tol);
        }
        Some(Sub::Beta(b)) => {
            cfg.command = Some(Command::Beta);
            set(&mut cfg.beta.n_grid, b.n_grid);
            set(&mut cfg.beta.r_ratio, b.r_ratio);
            set(&mut cfg.beta.n_paths, b.n_paths);
            set(
                &mut cfg.beta.method,
                b.method.map(|m| match m {
                    BetaMethodArg::Auto => BetaMethod::Auto,
                    BetaMethodArg::Enum => BetaMethod::Enum,
                    BetaMethodArg::LocaltimeMc => BetaMethod::LocaltimeMc,
                }),
            );
        }
        Some(Sub::Variational(v)) => {
            cfg.command = Some(Command::Variational);
            set(&mut cfg.variational.n_samples, v.n_samples);
            set(
                &mut cfg.variational.family,
                v.family.map(|f| match f {
                    FamilyArg::ExponentialTilt => FamilyChoice::ExponentialTilt,
                    FamilyArg::FreeSimplex => FamilyChoice::FreeSimplex,
                }),
            );
        }
        Some(Sub::TreeReduce(t)) => {
            cfg.command = Some(Command::TreeReduce);
            set(&mut cfg.tree.d, t.d);
            set(&mut cfg.tree.depth_cap, t.depth);
            set(&mut cfg.tree.n_samples, t.n_samples);
            if t.drift_p.is_some() {
                cfg.tree.drift_p = t.drift_p;
            }
            if t.env_out.is_some() {
                cfg.tree.env_out = t.env_out;
            }
        }
        Some(Sub::Green(g)) => {
            cfg.command = Some(Command::Green);
            set(&mut cfg.green.distances, g.distances);
            if g.env.is_some() {
                cfg.green.env = g.env;
            }
        }
        Some(Sub::Selftest) => cfg.command = Some(Command::Selftest),
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_file(path: &std::path::Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    let cfg = resolve(cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config {
                field: Some("threads".into()),
                message: "must be at least 1".into(),
            });
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config {
        field: Some("threads".into()),
        message: e.to_string(),
    })?;
    let out = pool.install(|| commands::run(&cfg))?;

    let body = match cfg.format {
        Format::Csv => out.csv,
        Format::Json => serde_json::to_string_pretty(&out.json).expect("output serializes") + "\n",
    };
    let manifest = serde_json::to_string_pretty(&Manifest::new(&cfg)).expect("manifest serializes") + "\n";
    for (path, text) in &out.files {
        write_file(path, text)?;
    }
    match &cfg.out {
        Some(path) => {
            write_file(path, &body)?;
            write_file(&sibling(path, ".manifest.json"), &manifest)?;
            eprintln!("{}", out.summary);
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Io {
                    path: "<stdout>".into(),
                    source: e,
                })?;
            eprintln!("{}", out.summary);
            eprintln!(
                "{}",
                serde_json::to_string(&Manifest::new(&cfg)).expect("manifest serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
