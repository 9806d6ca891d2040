//! Run configuration: the JSON file layout, flag overrides and validation.

use std::path::{Path, PathBuf};

use killwalk::entropy::FamilyChoice;
use killwalk::env::DistributionSpec;
use killwalk::lyapunov::{BetaMethod, DEFAULT_ENUM_CAP};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Alpha,
    Beta,
    Variational,
    TreeReduce,
    Green,
    Selftest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMethod {
    #[default]
    Mc,
    Ergodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaParams {
    pub method: AlphaMethod,
    pub n_samples: usize,
    pub tol: f64,
    pub r_max: i64,
    pub step_right_prob: f64,
    /// Distance for the ergodic method.
    pub n_ergodic: u64,
    pub r_offset: i64,
}

impl Default for AlphaParams {
    fn default() -> Self {
        Self {
            method: AlphaMethod::Mc,
            n_samples: 1000,
            tol: 1e-9,
            r_max: -(1 << 20),
            step_right_prob: 0.5,
            n_ergodic: 10_000,
            r_offset: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaParams {
    pub n_grid: Vec<i64>,
    pub r_ratio: f64,
    pub method: BetaMethod,
    pub n_paths: usize,
    pub enum_cap: u64,
}

impl Default for BetaParams {
    fn default() -> Self {
        Self {
            n_grid: vec![2, 4, 8, 16],
            r_ratio: 4.0,
            method: BetaMethod::Auto,
            n_paths: 200_000,
            enum_cap: DEFAULT_ENUM_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalParams {
    pub family: FamilyChoice,
    pub theta_min: Option<f64>,
    pub theta_max: Option<f64>,
    pub min_atom_weight: f64,
    pub grid_points: usize,
    pub param_tol: f64,
    pub max_evals: usize,
    pub n_samples: usize,
}

impl Default for VariationalParams {
    fn default() -> Self {
        Self {
            family: FamilyChoice::ExponentialTilt,
            theta_min: None,
            theta_max: None,
            min_atom_weight: 1e-2,
            grid_points: 21,
            param_tol: 1e-4,
            max_evals: 200,
            n_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub d: u32,
    /// Predecessor step probability; absent means the simple walk, `1/d`.
    pub drift_p: Option<f64>,
    pub depth_cap: u32,
    pub window_lo: i64,
    pub window_hi: i64,
    /// Environments averaged for the reduced quenched estimate; 0 skips it.
    pub n_samples: usize,
    pub tol: f64,
    /// Where the rho environment goes; defaults to `<out>.env.json`.
    pub env_out: Option<PathBuf>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            d: 3,
            drift_p: None,
            depth_cap: 10,
            window_lo: -32,
            window_hi: 32,
            n_samples: 100,
            tol: 1e-9,
            env_out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenParams {
    /// Environment file; sampled from the distribution when absent.
    pub env: Option<PathBuf>,
    pub window_lo: i64,
    pub window_hi: i64,
    pub x: i64,
    pub distances: Vec<i64>,
    pub step_right_prob: f64,
}

impl Default for GreenParams {
    fn default() -> Self {
        Self {
            env: None,
            window_lo: -100,
            window_hi: 100,
            x: 0,
            distances: vec![5, 10, 20],
            step_right_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub distribution: DistributionSpec,
    pub seed: u64,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub alpha: AlphaParams,
    pub beta: BetaParams,
    pub variational: VariationalParams,
    pub tree: TreeParams,
    pub green: GreenParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            distribution: DistributionSpec::Finite {
                atoms: vec![(0.0, 0.5), (1.0, 0.5)],
            },
            seed: 0,
            format: Format::Csv,
            out: None,
            alpha: AlphaParams::default(),
            beta: BetaParams::default(),
            variational: VariationalParams::default(),
            tree: TreeParams::default(),
            green: GreenParams::default(),
        }
    }
}

/// What a run leaves next to its output: enough to repeat it bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub master_seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool: "killwalk".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            master_seed: config.seed,
            config: config.clone(),
        }
    }
}

/// Reads a run configuration, or the configuration recorded in a manifest.
pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
        field: None,
        message: format!("{}: {e}", path.display()),
    })?;
    let is_manifest = value.get("config").is_some() && value.get("tool").is_some();
    if is_manifest {
        parse_value::<Manifest>(value, path).map(|m| m.config)
    } else {
        parse_value::<RunConfig>(value, path)
    }
}

fn parse_value<T: serde::de::DeserializeOwned>(value: serde_json::Value, path: &Path) -> Result<T, CliError> {
    let dist = value
        .pointer("/config/distribution")
        .or_else(|| value.get("distribution"))
        .cloned();
    serde_path_to_error::deserialize(value).map_err(|e| {
        let mut field = e.path().to_string();
        if field.ends_with("distribution") {
            if let Some(f) = dist.as_ref().and_then(malformed_atom) {
                field = format!("{field}.{f}");
            }
        }
        CliError::Config {
            message: format!("{}: {field}: {}", path.display(), e.inner()),
            field: Some(field),
        }
    })
}

/// Parses a JSON string, reporting the path of the offending field.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let field = if field == "." {
            serde_json::from_str(text)
                .ok()
                .and_then(|v| malformed_atom(&v))
                .map_or_else(|| what.to_string(), |f| format!("{what}.{f}"))
        } else {
            format!("{what}.{field}")
        };
        CliError::Config {
            message: format!("{field}: {}", e.inner()),
            field: Some(field),
        }
    })
}

/// Tagged enums lose the error path; find a bad atom by hand.
fn malformed_atom(v: &serde_json::Value) -> Option<String> {
    let atoms = v.get("atoms")?;
    let Some(list) = atoms.as_array() else {
        return Some("atoms".into());
    };
    for (i, atom) in list.iter().enumerate() {
        match atom.as_array().map(|a| a.as_slice()) {
            Some([value, weight]) => {
                if !value.is_number() {
                    return Some(format!("atoms[{i}].value"));
                }
                if !weight.is_number() {
                    return Some(format!("atoms[{i}].weight"));
                }
            }
            _ => return Some(format!("atoms[{i}]")),
        }
    }
    None
}

/// `out` with `suffix` appended to the file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}
