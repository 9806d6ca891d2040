//! Quenched and annealed Lyapunov exponent estimators.
//!
//! By the norm property only the exponents at `x = 1` are estimated. Quenched
//! estimates average `F = a(0, 1)` over sampled environments or run a single long
//! environment through the additive decomposition; annealed estimates enumerate
//! finite-support laws exactly or reweight walk paths by the Laplace transform of
//! the local times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{LazyField, PotentialDistribution, SampledField, WindowView};
use crate::error::{Error, Result};
use crate::line_solver::{f_limit, log_left_passage, step_increments, LimitConfig};
use crate::rng::{mix64, KeyedStream};
use crate::stats::{affine_fit, batch_means_std_err, Moments, Z95};

/// Dropped samples allowed before a quenched run fails.
pub const MAX_DROPPED_FRACTION: f64 = 0.01;

/// Default enumeration cap on the number of potential configurations.
pub const DEFAULT_ENUM_CAP: u64 = 1 << 22;

const LOCALTIME_TAG: u64 = 0x4c6f_6354_696d_6531;
const ENUM_CHUNK: u64 = 1 << 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    QuenchedMc,
    QuenchedErgodic,
    AnnealedEnum,
    AnnealedLocaltimeMc,
    AnnealedExtrapolated,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::QuenchedMc => "quenched-mc",
            Method::QuenchedErgodic => "quenched-ergodic",
            Method::AnnealedEnum => "annealed-enum",
            Method::AnnealedLocaltimeMc => "annealed-localtime-mc",
            Method::AnnealedExtrapolated => "annealed-extrapolated",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateParams {
    pub r: Option<i64>,
    pub n: Option<i64>,
    pub seed: u64,
    pub stream_offset: u64,
    pub tol: Option<f64>,
    pub n_grid: Vec<i64>,
}

/// Point estimate of an exponent with a 95% interval and a separate truncation term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub ci_halfwidth: f64,
    pub std_err: f64,
    /// Deterministic truncation bias bound, never folded into `ci_halfwidth`.
    pub trunc_bias: f64,
    pub n_samples: usize,
    pub dropped: usize,
    /// Zero potential: no killing and the exponent is zero.
    pub trivial: bool,
    method: Method,
    pub params: EstimateParams,
}

impl LyapunovEstimate {
    pub fn new(method: Method, value: f64, std_err: f64, n_samples: usize, params: EstimateParams) -> Self {
        Self {
            value,
            ci_halfwidth: Z95 * std_err,
            std_err,
            trunc_bias: 0.0,
            n_samples,
            dropped: 0,
            trivial: false,
            method,
            params,
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// Statistical plus truncation budget.
    pub fn error_budget(&self) -> f64 {
        self.ci_halfwidth + self.trunc_bias
    }
}

/// Configuration of the quenched sample-mean estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaConfig {
    pub n_samples: usize,
    pub tol: f64,
    pub seed: u64,
    /// Sample `i` reads environment stream `stream_offset + i`.
    pub stream_offset: u64,
    pub r_max: i64,
    pub step_right_prob: f64,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            tol: 1e-9,
            seed: 0,
            stream_offset: 0,
            r_max: -(1 << 20),
            step_right_prob: 0.5,
        }
    }
}

/// Per-sample outcome of the quenched estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FSample {
    pub value: f64,
    pub trunc_bound: f64,
    pub r_used: i64,
}

/// `F(omega)` for each sampled environment, in sample order. `None` marks a
/// sample whose barrier doubling did not converge.
pub fn alpha_samples(dist: &PotentialDistribution<f64>, cfg: &AlphaConfig) -> Result<Vec<Option<FSample>>> {
    let limit = LimitConfig {
        tol: cfg.tol,
        r_start: -2,
        r_max: cfg.r_max,
        step_right_prob: cfg.step_right_prob,
    };
    (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let field = LazyField::new(SampledField::new(dist.clone(), cfg.seed, cfg.stream_offset + i));
            match f_limit(&field, &limit) {
                Ok(res) => Ok(Some(FSample {
                    value: res.a_value,
                    trunc_bound: res.trunc_bound,
                    r_used: res.r_used,
                })),
                Err(Error::NonConvergence { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `alpha(1) = E[F]` by Monte Carlo over i.i.d. environments.
pub fn estimate_alpha_mc(dist: &PotentialDistribution<f64>, cfg: &AlphaConfig) -> Result<LyapunovEstimate> {
    if cfg.n_samples < 2 {
        return Err(Error::InvalidParameter {
            name: "n_samples",
            reason: format!("need at least 2, got {}", cfg.n_samples),
        });
    }
    let params = EstimateParams {
        seed: cfg.seed,
        stream_offset: cfg.stream_offset,
        tol: Some(cfg.tol),
        ..EstimateParams::default()
    };
    if dist.is_delta_zero() && cfg.step_right_prob == 0.5 {
        let mut est = LyapunovEstimate::new(Method::QuenchedMc, 0.0, 0.0, cfg.n_samples, params);
        est.trivial = true;
        return Ok(est);
    }
    let samples = alpha_samples(dist, cfg)?;
    let mut moments = Moments::default();
    let mut trunc = Moments::default();
    let mut dropped = 0usize;
    let mut max_r = 0i64;
    for s in &samples {
        match s {
            Some(s) => {
                moments.push(s.value);
                trunc.push(s.trunc_bound);
                max_r = max_r.min(s.r_used);
            }
            None => dropped += 1,
        }
    }
    if dropped as f64 > MAX_DROPPED_FRACTION * cfg.n_samples as f64 {
        return Err(Error::TooManyDropped {
            dropped,
            total: cfg.n_samples,
        });
    }
    let mut est = LyapunovEstimate::new(
        Method::QuenchedMc,
        moments.mean(),
        moments.std_err(),
        moments.count as usize,
        EstimateParams {
            r: Some(max_r),
            ..params
        },
    );
    est.trunc_bias = trunc.mean();
    est.dropped = dropped;
    Ok(est)
}

/// Running ratios `a_r(0, k) / k` along one long environment.
#[derive(Clone, Debug, PartialEq)]
pub struct ErgodicRun {
    pub barrier: i64,
    /// `(k, a_r(0, k) / k)` for `k = 1..=n`.
    pub ratios: Vec<(u64, f64)>,
    /// `a_r(j, j+1)` for `j = 0..n`.
    pub increments: Vec<f64>,
    /// Batch-means standard error of the final ratio.
    pub std_err: f64,
}

impl ErgodicRun {
    pub fn final_ratio(&self) -> f64 {
        self.ratios.last().map(|r| r.1).unwrap_or(f64::NAN)
    }

    pub fn to_estimate(&self, seed: u64) -> LyapunovEstimate {
        LyapunovEstimate::new(
            Method::QuenchedErgodic,
            self.final_ratio(),
            self.std_err,
            self.increments.len(),
            EstimateParams {
                r: Some(self.barrier),
                n: Some(self.increments.len() as i64),
                seed,
                ..EstimateParams::default()
            },
        )
    }
}

/// Birkhoff average of single-step `a`-values on one environment (stream 0 of `seed`)
/// with a fixed barrier at `-|r_offset|`.
pub fn estimate_alpha_ergodic(
    dist: &PotentialDistribution<f64>,
    n: u64,
    r_offset: i64,
    seed: u64,
    step_right_prob: f64,
) -> Result<ErgodicRun> {
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: "distance must be at least 1".into(),
        });
    }
    let barrier = -r_offset.abs().max(1);
    let field = LazyField::new(SampledField::new(dist.clone(), seed, 0));
    let increments = step_increments(&field, barrier, 0, n as i64, step_right_prob)?;
    let mut acc = 0.0;
    let ratios = increments
        .iter()
        .enumerate()
        .map(|(j, a)| {
            acc += a;
            (j as u64 + 1, acc / (j as f64 + 1.0))
        })
        .collect();
    let std_err = batch_means_std_err(&increments, 20);
    Ok(ErgodicRun {
        barrier,
        ratios,
        increments,
        std_err,
    })
}

/// Exact expectations `E[g(omega)]` over all configurations of `n_sites` i.i.d.
/// finite-support potentials. Chunks are summed in index order, so the result does
/// not depend on the thread count.
pub fn enumerate_expectations<const K: usize, G>(
    dist: &PotentialDistribution<f64>,
    n_sites: usize,
    cap: u64,
    g: G,
) -> Result<[f64; K]>
where
    G: Fn(&[f64]) -> [f64; K] + Sync,
{
    let atoms = dist.atoms().ok_or_else(|| Error::UnsupportedDistribution {
        op: "enumeration",
        reason: "law has no finite support".into(),
    })?;
    let laws = vec![atoms; n_sites];
    enumerate_product(&laws, cap, g)
}

/// Exact expectations under the product of the per-site finite laws `laws[i]`.
pub fn enumerate_product<const K: usize, G>(laws: &[Vec<(f64, f64)>], cap: u64, g: G) -> Result<[f64; K]>
where
    G: Fn(&[f64]) -> [f64; K] + Sync,
{
    let configs: f64 = laws.iter().map(|l| l.len() as f64).product();
    if configs > cap as f64 {
        return Err(Error::EnumerationCap { configs, cap });
    }
    if laws.iter().any(|l| l.is_empty()) {
        return Err(Error::InvalidDistribution {
            field: "atoms".into(),
            reason: "empty site law".into(),
        });
    }
    let total = configs as u64;
    let n_chunks = total.div_ceil(ENUM_CHUNK);
    let partials: Vec<[f64; K]> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * ENUM_CHUNK;
            let end = (start + ENUM_CHUNK).min(total);
            let mut digits = vec![0usize; laws.len()];
            let mut rest = start;
            for (d, law) in digits.iter_mut().zip(laws) {
                *d = (rest % law.len() as u64) as usize;
                rest /= law.len() as u64;
            }
            let mut values: Vec<f64> = digits.iter().zip(laws).map(|(&d, l)| l[d].0).collect();
            let mut acc = [0.0; K];
            for _ in start..end {
                let weight: f64 = digits.iter().zip(laws).map(|(&d, l)| l[d].1).product();
                let out = g(&values);
                for k in 0..K {
                    acc[k] += weight * out[k];
                }
                for ((d, v), law) in digits.iter_mut().zip(values.iter_mut()).zip(laws) {
                    *d += 1;
                    if *d < law.len() {
                        *v = law[*d].0;
                        break;
                    }
                    *d = 0;
                    *v = law[0].0;
                }
            }
            acc
        })
        .collect();
    let mut out = [0.0; K];
    for p in &partials {
        for k in 0..K {
            out[k] += p[k];
        }
    }
    Ok(out)
}

/// Result of exact annealed enumeration on the window `(r, n)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealedEnum {
    pub n: i64,
    pub r: i64,
    pub f_r: f64,
    pub b_r: f64,
    /// `E[a_r(0, n)]` on the same window (Jensen: `b_r <= mean_a`).
    pub mean_a: f64,
    /// Bound on `b_r - b` from the annealed killed probability of reaching `r` first.
    pub trunc_bound: f64,
    pub configs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealedConfig {
    pub step_right_prob: f64,
    pub enum_cap: u64,
}

impl Default for AnnealedConfig {
    fn default() -> Self {
        Self {
            step_right_prob: 0.5,
            enum_cap: DEFAULT_ENUM_CAP,
        }
    }
}

fn check_annealed_window(n: i64, r: i64) -> Result<()> {
    if n < 1 || r >= 0 {
        return Err(Error::IllPosedWindow(format!(
            "need n >= 1 and r < 0, got n={n}, r={r}"
        )));
    }
    Ok(())
}

/// `f_r(0, n) = E[e_r(0, n, omega)]` by full enumeration of the potentials on `r+1..n-1`.
pub fn annealed_exact_enum(
    dist: &PotentialDistribution<f64>,
    n: i64,
    r: i64,
    cfg: &AnnealedConfig,
) -> Result<AnnealedEnum> {
    check_annealed_window(n, r)?;
    let p = cfg.step_right_prob;
    let n_sites = (n - r - 1) as usize;
    let [f_r, k_r, mean_a] = enumerate_expectations(dist, n_sites, cfg.enum_cap, |values| {
        let view = WindowView { lo: r + 1, values };
        let a: f64 = step_increments(&view, r, 0, n, p)
            .expect("window covers the sweep")
            .iter()
            .sum();
        let log_k = log_left_passage(&view, n, 0, r, p).expect("window covers the sweep");
        [(-a).exp(), (-log_k).exp(), a]
    })?;
    let configs = (dist.atoms().map(|a| a.len()).unwrap_or(1) as u64).pow(n_sites as u32);
    Ok(AnnealedEnum {
        n,
        r,
        f_r,
        b_r: -f_r.ln(),
        mean_a,
        trunc_bound: (k_r / f_r).ln_1p(),
        configs,
    })
}

/// Local-time reweighting estimate of `f_r(0, n)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTimeEstimate {
    pub n: i64,
    pub r: i64,
    pub f_mean: f64,
    pub f_std_err: f64,
    /// Same estimator for paths exiting at `r`: annealed killed probability of reaching `r` first.
    pub k_mean: f64,
    pub n_paths: usize,
}

impl LocalTimeEstimate {
    pub fn b_r(&self) -> f64 {
        -self.f_mean.ln()
    }

    /// Delta-method standard error of `b_r`.
    pub fn b_std_err(&self) -> f64 {
        self.f_std_err / self.f_mean
    }

    pub fn trunc_bound(&self) -> f64 {
        (self.k_mean / self.f_mean).ln_1p()
    }
}

struct LaplaceTable {
    log_phi: Vec<f64>,
}

impl LaplaceTable {
    fn new(dist: &PotentialDistribution<f64>, len: usize) -> Self {
        Self {
            log_phi: (0..len as u64).map(|l| dist.laplace_transform(l).ln()).collect(),
        }
    }

    fn get(&self, dist: &PotentialDistribution<f64>, l: u64) -> f64 {
        match self.log_phi.get(l as usize) {
            Some(&v) => v,
            None => dist.laplace_transform(l).ln(),
        }
    }
}

/// Walks from 0 until exiting `(r, n)`; paths reaching `n` first carry the weight
/// `prod_x phi(l_x)` where `l_x` counts visits to `x` before exit. By Fubini the
/// mean weight is exactly `f_r(0, n)`.
pub fn annealed_localtime_mc(
    dist: &PotentialDistribution<f64>,
    n: i64,
    r: i64,
    n_paths: usize,
    seed: u64,
    step_right_prob: f64,
) -> Result<LocalTimeEstimate> {
    check_annealed_window(n, r)?;
    if n_paths == 0 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            reason: "need at least one path".into(),
        });
    }
    let table = LaplaceTable::new(dist, 4096);
    let width = (n - r - 1) as usize;
    let key = mix64(seed ^ LOCALTIME_TAG);
    let weights: Vec<(f64, f64)> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || vec![0u64; width],
            |visits, i| {
                visits.iter_mut().for_each(|v| *v = 0);
                let mut rng = KeyedStream::new(key, i).sequential();
                let mut pos = 0i64;
                let mut bits = 0u64;
                let mut left = 0u32;
                while pos > r && pos < n {
                    visits[(pos - r - 1) as usize] += 1;
                    let right = if step_right_prob == 0.5 {
                        if left == 0 {
                            bits = rng.next_u64();
                            left = 64;
                        }
                        let b = bits & 1 == 1;
                        bits >>= 1;
                        left -= 1;
                        b
                    } else {
                        rng.coin(step_right_prob)
                    };
                    pos += if right { 1 } else { -1 };
                }
                let log_w: f64 = visits.iter().filter(|&&l| l > 0).map(|&l| table.get(dist, l)).sum();
                let w = log_w.exp();
                if pos == n {
                    (w, 0.0)
                } else {
                    (0.0, w)
                }
            },
        )
        .collect();
    let mut f = Moments::default();
    let mut k = Moments::default();
    for &(fw, kw) in &weights {
        f.push(fw);
        k.push(kw);
    }
    Ok(LocalTimeEstimate {
        n,
        r,
        f_mean: f.mean(),
        f_std_err: f.std_err(),
        k_mean: k.mean(),
        n_paths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMethod {
    /// Enumeration when within the cap, local-time Monte Carlo otherwise.
    Auto,
    Enum,
    LocaltimeMc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaConfig {
    pub n_grid: Vec<i64>,
    pub r_ratio: f64,
    pub method: BetaMethod,
    pub seed: u64,
    pub n_paths: usize,
    pub annealed: AnnealedConfig,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![2, 4, 8, 16],
            r_ratio: 4.0,
            method: BetaMethod::Auto,
            seed: 0,
            n_paths: 200_000,
            annealed: AnnealedConfig::default(),
        }
    }
}

/// One grid row: the columns of the `beta` CSV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaGridPoint {
    pub n: i64,
    pub r: i64,
    pub b: f64,
    pub b_over_n: f64,
    pub method: Method,
    /// Standard error of `b_over_n` (zero for enumeration).
    pub stat_err: f64,
    /// Truncation bound on `b_over_n`.
    pub trunc_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub estimate: LyapunovEstimate,
    pub grid: Vec<BetaGridPoint>,
    /// `min_n b_r(0, n) / n`: every grid value bounds `beta` from above.
    pub min_upper_bound: f64,
    pub min_upper_bound_err: f64,
}

/// Barrier for distance `n`: `-ceil(r_ratio * n)`.
pub fn barrier_for(n: i64, r_ratio: f64) -> i64 {
    -((r_ratio * n as f64).ceil() as i64).max(1)
}

fn enum_feasible(dist: &PotentialDistribution<f64>, n: i64, r: i64, cap: u64) -> bool {
    match dist.atoms() {
        Some(atoms) => (atoms.len() as f64).powi((n - r - 1) as i32) <= cap as f64,
        None => false,
    }
}

/// `beta(1)` from `b_r(0, n)` on a grid of distances, extrapolated by the affine
/// model `b(0, n) = beta n + c` on the top half of the grid.
pub fn estimate_beta(dist: &PotentialDistribution<f64>, cfg: &BetaConfig) -> Result<BetaReport> {
    if cfg.n_grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "n_grid",
            reason: "grid is empty".into(),
        });
    }
    if cfg.n_grid.windows(2).any(|w| w[0] >= w[1]) || cfg.n_grid[0] < 1 {
        return Err(Error::InvalidParameter {
            name: "n_grid",
            reason: "distances must be positive and strictly increasing".into(),
        });
    }
    if !(cfg.r_ratio > 0.0) {
        return Err(Error::InvalidParameter {
            name: "r_ratio",
            reason: format!("must be positive, got {}", cfg.r_ratio),
        });
    }
    let p = cfg.annealed.step_right_prob;
    let mut grid = Vec::with_capacity(cfg.n_grid.len());
    for (gi, &n) in cfg.n_grid.iter().enumerate() {
        let r = barrier_for(n, cfg.r_ratio);
        let use_enum = match cfg.method {
            BetaMethod::Enum => true,
            BetaMethod::LocaltimeMc => false,
            BetaMethod::Auto => enum_feasible(dist, n, r, cfg.annealed.enum_cap),
        };
        let nf = n as f64;
        let point = if use_enum {
            let e = annealed_exact_enum(dist, n, r, &cfg.annealed)?;
            BetaGridPoint {
                n,
                r,
                b: e.b_r,
                b_over_n: e.b_r / nf,
                method: Method::AnnealedEnum,
                stat_err: 0.0,
                trunc_err: e.trunc_bound / nf,
            }
        } else {
            let seed = mix64(cfg.seed.wrapping_add(gi as u64));
            let e = annealed_localtime_mc(dist, n, r, cfg.n_paths, seed, p)?;
            if !(e.f_mean > 0.0) || e.b_std_err() > 0.5 {
                return Err(Error::DegenerateEstimate(format!(
                    "local-time estimate at n={n}, r={r}: mean {} with relative error {}",
                    e.f_mean,
                    e.b_std_err()
                )));
            }
            BetaGridPoint {
                n,
                r,
                b: e.b_r(),
                b_over_n: e.b_r() / nf,
                method: Method::AnnealedLocaltimeMc,
                stat_err: e.b_std_err() / nf,
                trunc_err: e.trunc_bound() / nf,
            }
        };
        grid.push(point);
    }

    let (min_idx, min_point) = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.b_over_n.total_cmp(&b.1.b_over_n))
        .expect("nonempty grid");
    let min_upper_bound = min_point.b_over_n;
    let min_upper_bound_err = Z95 * grid[min_idx].stat_err;

    let top = &grid[grid.len() / 2..];
    let params = EstimateParams {
        r: Some(grid.last().map(|g| g.r).unwrap_or(0)),
        n: grid.last().map(|g| g.n),
        seed: cfg.seed,
        n_grid: cfg.n_grid.clone(),
        ..EstimateParams::default()
    };
    let n_samples = if grid.iter().all(|g| g.method == Method::AnnealedEnum) {
        grid.len()
    } else {
        cfg.n_paths * grid.len()
    };
    let mut estimate = if top.len() >= 2 {
        let pts: Vec<(f64, f64, f64)> = top.iter().map(|g| (g.n as f64, g.b, g.stat_err * g.n as f64)).collect();
        let fit = affine_fit(&pts).expect("distinct grid points");
        let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
        let trunc: f64 = top
            .iter()
            .map(|g| ((g.n as f64 - mean_x) / sxx).abs() * g.trunc_err * g.n as f64)
            .sum();
        let mut est = LyapunovEstimate::new(
            Method::AnnealedExtrapolated,
            fit.slope.max(0.0),
            fit.slope_std_err,
            n_samples,
            params,
        );
        est.trunc_bias = trunc;
        est
    } else {
        let g = &grid[grid.len() - 1];
        let mut est = LyapunovEstimate::new(g.method, g.b_over_n, g.stat_err, n_samples, params);
        est.trunc_bias = g.trunc_err;
        est
    };
    estimate.trivial = dist.is_delta_zero();
    Ok(BetaReport {
        estimate,
        grid,
        min_upper_bound,
        min_upper_bound_err,
    })
}
