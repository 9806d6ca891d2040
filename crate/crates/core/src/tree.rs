//! Killed walks on the d-regular tree reduced to killed walks on a geodesic.
//!
//! Every vertex off the geodesic belongs to a branch hanging from one geodesic site.
//! The walk started at a geodesic site either dies inside those branches, escapes
//! to infinity, or steps onto a neighbouring geodesic site; the survival weight of
//! that excursion is `h` and `rho = -ln h` is the effective line potential.
//!
//! Branch potentials are addressed by hashed vertex keys inside a per-site keyed
//! stream, so the exact recursion and the trajectory simulation read the same
//! environment and distinct sites never share randomness.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, PotentialDistribution, PotentialField};
use crate::error::{Error, Result};
use crate::line_solver::{f_limit, log_survival_profile, LimitConfig};
use crate::lyapunov::{enumerate_product, EstimateParams, LyapunovEstimate, Method, MAX_DROPPED_FRACTION};
use crate::rng::{mix64, substream, zigzag, KeyedStream};
use crate::stats::Moments;

const TREE_TAG: u64 = 0x5472_6565_5369_7465;
const EXCURSION_TAG: u64 = 0x4578_6375_7273_696f;
const UP_SALT: u64 = 0x7570_7761_7264_2121;
const SITE_KEY: u64 = 0;

/// Largest number of explicitly visited branch vertices per geodesic site.
pub const MAX_SITE_VERTICES: f64 = (1u64 << 22) as f64;

/// Depth beyond which a simulated excursion counts as escaped.
pub const ESCAPE_DEPTH: usize = 256;

/// `F(z)`: generating function of the first-passage time to a fixed neighbour for
/// the simple random walk on `T_d`.
pub fn first_passage_gf(d: u32, z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let d = f64::from(d);
    (d - (d * d - 4.0 * (d - 1.0) * z * z).sqrt()) / (2.0 * (d - 1.0) * z)
}

/// `L(z)` solved from `L = (2/d) z + ((d-2)/d) z F(z) L`.
pub fn l_gf(d: u32, z: f64) -> f64 {
    let df = f64::from(d);
    (2.0 / df) * z / (1.0 - (df - 2.0) / df * z * first_passage_gf(d, z))
}

/// `|L - (2/d) z - ((d-2)/d) z F(z) L|` at the closed form `L(1)`.
pub fn l_recursion_residual(d: u32) -> f64 {
    let df = f64::from(d);
    let l = sigma_finite_prob(d);
    (l - (2.0 / df) - (df - 2.0) / df * first_passage_gf(d, 1.0) * l).abs()
}

/// `L(1) = 2(d-1)/((d-1)^2+1)`: the probability that the walk ever steps onto one of
/// two fixed neighbours' geodesic continuation, i.e. `P[sigma < inf]`.
pub fn sigma_finite_prob(d: u32) -> f64 {
    let m = f64::from(d) - 1.0;
    let l = 2.0 * m / (m * m + 1.0);
    debug_assert!({
        let df = f64::from(d);
        (l - (2.0 / df) - (df - 2.0) / df * first_passage_gf(d, 1.0) * l).abs() <= 1e-12
    });
    l
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub d: u32,
    /// Probability of stepping to the predecessor; `1/d` is the simple walk.
    pub drift_p: f64,
    pub depth_cap: u32,
}

impl TreeConfig {
    pub fn new(d: u32, drift_p: f64, depth_cap: u32) -> Result<Self> {
        if d < 3 {
            return Err(Error::InvalidParameter {
                name: "d",
                reason: format!("need d >= 3, got {d}"),
            });
        }
        if !(drift_p > 0.0 && drift_p < 1.0) {
            return Err(Error::InvalidParameter {
                name: "drift_p",
                reason: format!("must lie in (0, 1), got {drift_p}"),
            });
        }
        if depth_cap < 1 {
            return Err(Error::InvalidParameter {
                name: "depth_cap",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self { d, drift_p, depth_cap })
    }

    pub fn symmetric(d: u32, depth_cap: u32) -> Result<Self> {
        Self::new(d, 1.0 / f64::from(d.max(1)), depth_cap)
    }

    pub fn with_depth(self, depth_cap: u32) -> Result<Self> {
        Self::new(self.d, self.drift_p, depth_cap)
    }

    pub fn is_symmetric(&self) -> bool {
        self.drift_p == 1.0 / f64::from(self.d)
    }

    pub fn parent_prob(&self) -> f64 {
        self.drift_p
    }

    /// Probability of each of the `d - 1` child steps.
    pub fn child_prob(&self) -> f64 {
        if self.is_symmetric() {
            self.drift_p
        } else {
            (1.0 - self.drift_p) / f64::from(self.d - 1)
        }
    }

    /// Return weight of a potential-free branch: the smaller root of
    /// `W = p / (1 - (d-1) c W)`.
    pub fn free_branch_weight(&self) -> f64 {
        if self.is_symmetric() {
            return first_passage_gf(self.d, 1.0);
        }
        let p = self.drift_p;
        (1.0 - (1.0 - 2.0 * p).abs()) / (2.0 * (1.0 - p))
    }

    /// Return weight through the parent of a turning point with no potential: the
    /// smaller root of `U = c / (1 - p U - (d-2) c W0)`.
    pub fn free_upward_weight(&self) -> f64 {
        let (p, c) = (self.parent_prob(), self.child_prob());
        let b = 1.0 - f64::from(self.d - 2) * c * self.free_branch_weight();
        (b - (b * b - 4.0 * p * c).max(0.0).sqrt()) / (2.0 * p)
    }

    fn dfs_vertices(&self, site: SiteType) -> f64 {
        let m = f64::from(self.d - 1);
        let per_branch = m.powi(self.depth_cap as i32 + 1);
        match site {
            SiteType::Monotone => f64::from(self.d - 2) * per_branch,
            SiteType::Turning => f64::from(self.depth_cap) * f64::from(self.d - 1) * per_branch,
        }
    }
}

/// `P[Z_sigma = x_{i+1} | sigma < inf]` on a monotone geodesic oriented uphill.
pub fn geodesic_step_prob(cfg: &TreeConfig) -> f64 {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    if p == c {
        0.5
    } else {
        p / (p + c)
    }
}

/// Certified two-sided bracket on a survival weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSurvival {
    pub lower: f64,
    pub upper: f64,
    pub depth_used: u32,
}

impl BranchSurvival {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Potentials on tree vertices addressed by vertex key.
pub trait VertexField {
    fn omega(&self, key: u64) -> f64;

    /// Set when every vertex carries the same value.
    fn constant(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantVertices(pub f64);

impl VertexField for ConstantVertices {
    fn omega(&self, _: u64) -> f64 {
        self.0
    }

    fn constant(&self) -> Option<f64> {
        Some(self.0)
    }
}

/// Arbitrary vertex potentials from a closure.
pub struct FnVertices<F>(pub F);

impl<F: Fn(u64) -> f64> VertexField for FnVertices<F> {
    fn omega(&self, key: u64) -> f64 {
        (self.0)(key)
    }
}

/// i.i.d. potentials drawn by inverse CDF from one keyed stream.
#[derive(Clone, Debug)]
pub struct KeyedVertices {
    dist: PotentialDistribution<f64>,
    stream: KeyedStream,
}

impl KeyedVertices {
    pub fn new(dist: &PotentialDistribution<f64>, seed: u64, stream_id: u64) -> Self {
        Self {
            dist: dist.clone(),
            stream: KeyedStream::new(seed, stream_id),
        }
    }

    /// The vertices hanging from geodesic site `site` in environment `sample`.
    pub fn for_site(dist: &PotentialDistribution<f64>, seed: u64, sample: u64, site: i64) -> Self {
        Self::new(dist, seed, site_stream(sample, site))
    }
}

impl VertexField for KeyedVertices {
    fn omega(&self, key: u64) -> f64 {
        match self.dist.constant_value() {
            Some(v) => v,
            None => self.dist.quantile(self.stream.uniform(key)),
        }
    }

    fn constant(&self) -> Option<f64> {
        self.dist.constant_value()
    }
}

fn site_stream(sample: u64, site: i64) -> u64 {
    substream(substream(TREE_TAG, sample), zigzag(site))
}

/// Key of the `j`-th child of `parent`.
#[inline]
pub fn child_key(parent: u64, j: u32) -> u64 {
    mix64(parent.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (u64::from(j) + 1))
}

/// Key of the predecessor of an upward-chain vertex.
#[inline]
pub fn up_key(key: u64) -> u64 {
    mix64(key ^ UP_SALT)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteType {
    /// Geodesic neighbours are the predecessor and one child; `d - 2` child branches.
    Monotone,
    /// Both geodesic neighbours are children; the predecessor starts an upward branch.
    Turning,
}

fn ratio(num: f64, kill: f64, load: f64) -> Result<f64> {
    let denom = 1.0 - kill * load;
    if !(denom > 0.0) {
        return Err(Error::BranchDenominator(denom));
    }
    Ok(num * kill / denom)
}

#[derive(Clone, Copy)]
struct Pair {
    lo: f64,
    hi: f64,
}

fn branch_pair<V: VertexField>(cfg: &TreeConfig, field: &V, key: u64, level: u32) -> Result<Pair> {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let kill = (-field.omega(key)).exp();
    let (mut lo, mut hi) = (0.0, 0.0);
    if level >= cfg.depth_cap {
        hi = f64::from(cfg.d - 1) * c * cfg.free_branch_weight();
    } else {
        for j in 0..cfg.d - 1 {
            let w = branch_pair(cfg, field, child_key(key, j), level + 1)?;
            lo += c * w.lo;
            hi += c * w.hi;
        }
    }
    Ok(Pair {
        lo: ratio(p, kill, lo)?,
        hi: ratio(p, kill, hi)?,
    })
}

fn homogeneous_branch(cfg: &TreeConfig, omega: f64) -> Result<Pair> {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let m = f64::from(cfg.d - 1) * c;
    let kill = (-omega).exp();
    let mut w = Pair {
        lo: 0.0,
        hi: cfg.free_branch_weight(),
    };
    for _ in 0..cfg.depth_cap {
        w = Pair {
            lo: ratio(p, kill, m * w.lo)?,
            hi: ratio(p, kill, m * w.hi)?,
        };
    }
    Ok(w)
}

/// Return weight `W` of the branch rooted at `root_key`: the expected survival weight
/// of the walk started at the root until it steps back to the root's predecessor.
/// Levels `1..=depth_cap` are explicit; beyond them the lower bound kills and the
/// upper bound uses the potential-free weight.
pub fn branch_return_weight<V: VertexField>(cfg: &TreeConfig, field: &V, root_key: u64) -> Result<BranchSurvival> {
    let w = match field.constant() {
        Some(v) => homogeneous_branch(cfg, v)?,
        None => branch_pair(cfg, field, root_key, 1)?,
    };
    Ok(BranchSurvival {
        lower: w.lo,
        upper: w.hi,
        depth_used: cfg.depth_cap,
    })
}

fn upward_pair<V: VertexField>(cfg: &TreeConfig, field: &V, key: u64, level: u32) -> Result<Pair> {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let kill = (-field.omega(key)).exp();
    let (mut lo, mut hi) = if level >= cfg.depth_cap {
        (0.0, p * cfg.free_upward_weight())
    } else {
        let u = upward_pair(cfg, field, up_key(key), level + 1)?;
        (p * u.lo, p * u.hi)
    };
    for j in 0..cfg.d - 2 {
        let w = branch_pair(cfg, field, child_key(key, j), 1)?;
        lo += c * w.lo;
        hi += c * w.hi;
    }
    Ok(Pair {
        lo: ratio(c, kill, lo)?,
        hi: ratio(c, kill, hi)?,
    })
}

fn homogeneous_upward(cfg: &TreeConfig, omega: f64, w: Pair) -> Result<Pair> {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let side = f64::from(cfg.d - 2) * c;
    let kill = (-omega).exp();
    let mut u = Pair {
        lo: 0.0,
        hi: cfg.free_upward_weight(),
    };
    for _ in 0..cfg.depth_cap {
        u = Pair {
            lo: ratio(c, kill, p * u.lo + side * w.lo)?,
            hi: ratio(c, kill, p * u.hi + side * w.hi)?,
        };
    }
    Ok(u)
}

/// `h = E_{x_i}[exp(-sum_{k < sigma} omega(Z_k)); sigma < inf]` at the geodesic site
/// whose own potential is `field.omega(0)`.
pub fn excursion_survival_h<V: VertexField>(cfg: &TreeConfig, field: &V, site: SiteType) -> Result<BranchSurvival> {
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let kill = (-field.omega(SITE_KEY)).exp();
    let (geo, n_children) = match site {
        SiteType::Monotone => (p + c, cfg.d - 2),
        SiteType::Turning => (2.0 * c, cfg.d - 3),
    };
    let (mut lo, mut hi) = (0.0, 0.0);
    match field.constant() {
        Some(v) => {
            let w = homogeneous_branch(cfg, v)?;
            lo += f64::from(n_children) * c * w.lo;
            hi += f64::from(n_children) * c * w.hi;
            if site == SiteType::Turning {
                let u = homogeneous_upward(cfg, v, w)?;
                lo += p * u.lo;
                hi += p * u.hi;
            }
        }
        None => {
            if cfg.dfs_vertices(site) > MAX_SITE_VERTICES {
                return Err(Error::InvalidParameter {
                    name: "depth_cap",
                    reason: format!(
                        "depth {} on T_{} needs about {:.3e} vertices per site, cap {:.3e}",
                        cfg.depth_cap,
                        cfg.d,
                        cfg.dfs_vertices(site),
                        MAX_SITE_VERTICES
                    ),
                });
            }
            for j in 0..n_children {
                let w = branch_pair(cfg, field, child_key(SITE_KEY, j), 1)?;
                lo += c * w.lo;
                hi += c * w.hi;
            }
            if site == SiteType::Turning {
                let u = upward_pair(cfg, field, up_key(SITE_KEY), 1)?;
                lo += p * u.lo;
                hi += p * u.hi;
            }
        }
    }
    // Outward rounding: roughly one rounding per level of the recursion.
    let pad = f64::EPSILON * (8.0 + 4.0 * f64::from(cfg.depth_cap));
    Ok(BranchSurvival {
        lower: ratio(geo, kill, lo)? * (1.0 - pad),
        upper: ratio(geo, kill, hi)? * (1.0 + pad),
        depth_used: cfg.depth_cap,
    })
}

/// Effective potential at one geodesic site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoPotential {
    pub site_index: i64,
    pub rho_lower: f64,
    pub rho_upper: f64,
    pub h_bracket: BranchSurvival,
}

impl RhoPotential {
    pub fn from_bracket(site_index: i64, h: BranchSurvival) -> Self {
        Self {
            site_index,
            rho_lower: -h.upper.ln(),
            rho_upper: -h.lower.ln(),
            h_bracket: h,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.rho_lower + self.rho_upper)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.rho_upper - self.rho_lower)
    }
}

/// `rho` at geodesic site `site` of environment `sample`.
pub fn site_rho(
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    seed: u64,
    sample: u64,
    site: i64,
    kind: SiteType,
) -> Result<RhoPotential> {
    let field = KeyedVertices::for_site(dist, seed, sample, site);
    Ok(RhoPotential::from_bracket(
        site,
        excursion_survival_h(cfg, &field, kind)?,
    ))
}

/// `rho` brackets for the monotone geodesic sites `0..n`, computed in parallel.
pub fn rho_sequence(
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<RhoPotential>> {
    rho_window(cfg, dist, 0, n as i64 - 1, seed, 0)
}

/// `rho` brackets for the monotone geodesic sites `lo..=hi` of environment `sample`.
pub fn rho_window(
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    lo: i64,
    hi: i64,
    seed: u64,
    sample: u64,
) -> Result<Vec<RhoPotential>> {
    if hi < lo {
        return Err(Error::IllPosedWindow(format!("empty geodesic window [{lo}, {hi}]")));
    }
    (lo..=hi)
        .into_par_iter()
        .map(|i| site_rho(cfg, dist, seed, sample, i, SiteType::Monotone))
        .collect()
}

/// Monte Carlo estimate of a survival weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Site,
    Down,
    Up,
}

/// Simulates `n_paths` excursions from the geodesic site of `field` and averages
/// `exp(-sum omega)` over those that step onto a geodesic neighbour.
pub fn simulate_excursions<V: VertexField + Sync>(
    cfg: &TreeConfig,
    field: &V,
    site: SiteType,
    n_paths: usize,
    seed: u64,
) -> McEstimate {
    const CHUNK: usize = 1024;
    let (p, c) = (cfg.parent_prob(), cfg.child_prob());
    let d = cfg.d;
    let chunks: Vec<Moments> = (0..n_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut m = Moments::default();
            let mut stack: Vec<(u64, Role)> = Vec::with_capacity(64);
            for path in chunk * CHUNK..((chunk + 1) * CHUNK).min(n_paths) {
                let mut rng = KeyedStream::new(seed, substream(EXCURSION_TAG, path as u64)).sequential();
                stack.clear();
                stack.push((SITE_KEY, Role::Site));
                let mut log_w = 0.0;
                let weight = loop {
                    let (key, role) = *stack.last().expect("walk stack never empties");
                    log_w += field.omega(key);
                    if log_w > 745.0 || stack.len() > ESCAPE_DEPTH {
                        break 0.0;
                    }
                    let u = rng.next_f64();
                    match role {
                        Role::Site => {
                            let geo = match site {
                                SiteType::Monotone => p + c,
                                SiteType::Turning => 2.0 * c,
                            };
                            if u < geo {
                                break (-log_w).exp();
                            }
                            let rest = u - geo;
                            if site == SiteType::Turning && (rest < p || d == 3) {
                                stack.push((up_key(key), Role::Up));
                            } else {
                                let off = if site == SiteType::Turning { rest - p } else { rest };
                                let j = ((off / c) as u32).min(d - 3);
                                stack.push((child_key(key, j), Role::Down));
                            }
                        }
                        Role::Down => {
                            if u < p {
                                stack.pop();
                            } else {
                                let j = (((u - p) / c) as u32).min(d - 2);
                                stack.push((child_key(key, j), Role::Down));
                            }
                        }
                        Role::Up => {
                            if u < c {
                                stack.pop();
                            } else if u < c + p {
                                stack.push((up_key(key), Role::Up));
                            } else {
                                let j = (((u - c - p) / c) as u32).min(d - 3);
                                stack.push((child_key(key, j), Role::Down));
                            }
                        }
                    }
                };
                m.push(weight);
            }
            m
        })
        .collect();
    let mut total = Moments::default();
    chunks.iter().for_each(|m| total.merge(m));
    McEstimate {
        mean: total.mean(),
        std_err: total.std_err(),
        n_paths,
    }
}

/// Orientation of the geodesic through the reduced line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeodesicKind {
    Monotone,
    TurningPoint { turning_index_k: i64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeodesicSpec {
    #[serde(flatten)]
    pub kind: GeodesicKind,
    pub start_index: i64,
    pub target_index: i64,
}

impl GeodesicSpec {
    pub fn monotone(start_index: i64, target_index: i64) -> Self {
        Self {
            kind: GeodesicKind::Monotone,
            start_index,
            target_index,
        }
    }

    pub fn turning(k: i64, start_index: i64, target_index: i64) -> Self {
        Self {
            kind: GeodesicKind::TurningPoint { turning_index_k: k },
            start_index,
            target_index,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target_index <= self.start_index {
            return Err(Error::IllPosedWindow(format!(
                "target {} must lie right of start {}",
                self.target_index, self.start_index
            )));
        }
        if let GeodesicKind::TurningPoint { turning_index_k: k } = self.kind {
            if k > self.target_index {
                return Err(Error::InvalidParameter {
                    name: "turning_index_k",
                    reason: format!("k = {k} lies beyond the target {}", self.target_index),
                });
            }
        }
        Ok(())
    }
}

/// Site-dependent shape of the reduced line: which sites are turning points and the
/// right-step probability at each site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LineShape {
    /// Uphill towards `+inf` everywhere.
    Uphill,
    /// Downhill towards `+inf` everywhere (the ray beyond a turning point).
    Downhill,
    Turning(i64),
}

impl LineShape {
    pub fn site_type(&self, i: i64) -> SiteType {
        match *self {
            LineShape::Turning(k) if i == k => SiteType::Turning,
            _ => SiteType::Monotone,
        }
    }

    pub fn step_right(&self, cfg: &TreeConfig, i: i64) -> f64 {
        let up = geodesic_step_prob(cfg);
        let (p, c) = (cfg.parent_prob(), cfg.child_prob());
        let down = if p == c { 0.5 } else { c / (p + c) };
        match *self {
            LineShape::Uphill => up,
            LineShape::Downhill => down,
            LineShape::Turning(k) if i < k => up,
            LineShape::Turning(k) if i == k => 0.5,
            LineShape::Turning(_) => down,
        }
    }
}

/// Which end of the `rho` bracket a [`RhoField`] exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BracketEnd {
    Lower,
    Mid,
    Upper,
}

/// Lazily computed, cached `rho` values along a whole geodesic.
pub struct RhoField<'a> {
    cfg: TreeConfig,
    dist: &'a PotentialDistribution<f64>,
    seed: u64,
    sample: u64,
    shape: LineShape,
    end: BracketEnd,
    cache: RefCell<BTreeMap<i64, RhoPotential>>,
}

impl<'a> RhoField<'a> {
    pub fn new(
        cfg: &TreeConfig,
        dist: &'a PotentialDistribution<f64>,
        seed: u64,
        sample: u64,
        shape: LineShape,
    ) -> Result<Self> {
        if dist.constant_value().is_none() {
            let worst = match shape {
                LineShape::Turning(_) => SiteType::Turning,
                _ => SiteType::Monotone,
            };
            if cfg.dfs_vertices(worst) > MAX_SITE_VERTICES {
                return Err(Error::InvalidParameter {
                    name: "depth_cap",
                    reason: format!("depth {} is too large for random branch potentials", cfg.depth_cap),
                });
            }
        }
        Ok(Self {
            cfg: *cfg,
            dist,
            seed,
            sample,
            shape,
            end: BracketEnd::Mid,
            cache: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn set_end(&mut self, end: BracketEnd) {
        self.end = end;
    }

    pub fn rho(&self, i: i64) -> RhoPotential {
        if let Some(r) = self.cache.borrow().get(&i) {
            return *r;
        }
        let r = site_rho(&self.cfg, self.dist, self.seed, self.sample, i, self.shape.site_type(i))
            .expect("depth validated at construction");
        self.cache.borrow_mut().insert(i, r);
        r
    }

    /// Largest half-width among the sites computed so far.
    pub fn max_half_width(&self) -> f64 {
        self.cache.borrow().values().map(|r| r.half_width()).fold(0.0, f64::max)
    }
}

impl PotentialField<f64> for RhoField<'_> {
    fn potential(&self, x: i64) -> Option<f64> {
        let r = self.rho(x);
        Some(match self.end {
            BracketEnd::Lower => r.rho_lower,
            BracketEnd::Mid => r.midpoint(),
            BracketEnd::Upper => r.rho_upper,
        })
    }
}

/// Effective line model of a monotone geodesic: `rho` midpoints as a line
/// environment, the geodesic step probability and the bracket half-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeReduction {
    pub config: TreeConfig,
    pub env: Environment<f64>,
    pub step_right_prob: f64,
    pub rho: Vec<RhoPotential>,
    pub max_half_width: f64,
}

/// `rho` environment of the monotone geodesic sites `lo..=hi` of environment `sample`.
pub fn reduce_to_line(
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    lo: i64,
    hi: i64,
    seed: u64,
    sample: u64,
) -> Result<TreeReduction> {
    let rho = rho_window(cfg, dist, lo, hi, seed, sample)?;
    let mut env = Environment::from_values(lo, rho.iter().map(|r| r.midpoint()).collect())?;
    env.seed = seed;
    env.stream_id = sample;
    Ok(TreeReduction {
        config: *cfg,
        env,
        step_right_prob: geodesic_step_prob(cfg),
        max_half_width: rho.iter().map(|r| r.half_width()).fold(0.0, f64::max),
        rho,
    })
}

/// Quenched exponent of the reduced line model with the systematic error inherited
/// from the `rho` brackets.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedAlpha {
    pub estimate: LyapunovEstimate,
    /// Mean over samples of the largest deviation of `F` at either bracket end from
    /// `F` at the midpoints.
    pub systematic: f64,
}

/// `alpha~(1) = E[F]` on the `rho` line of a monotone geodesic, `n_samples`
/// independent tree environments.
pub fn estimate_alpha_reduced(
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    n_samples: usize,
    seed: u64,
    tol: f64,
) -> Result<ReducedAlpha> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter {
            name: "n_samples",
            reason: format!("need at least 2, got {n_samples}"),
        });
    }
    let p = geodesic_step_prob(cfg);
    let limit = LimitConfig {
        tol,
        step_right_prob: p,
        ..LimitConfig::default()
    };
    // (value, truncation bound, systematic, barrier used) per environment.
    type Row = Option<(f64, f64, f64, i64)>;
    let per_sample: Vec<Result<Row>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut field = RhoField::new(cfg, dist, seed, s, LineShape::Uphill)?;
            let mid = match f_limit(&field, &limit) {
                Ok(v) => v,
                Err(Error::NonConvergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let r = mid.r_used;
            field.set_end(BracketEnd::Lower);
            let lo = window_f(&field, r, p)?;
            field.set_end(BracketEnd::Upper);
            let hi = window_f(&field, r, p)?;
            let sys = (mid.a_value - lo).max(hi - mid.a_value);
            Ok(Some((mid.a_value, mid.trunc_bound, sys, r)))
        })
        .collect();
    let mut m = Moments::default();
    let (mut trunc, mut sys) = (Moments::default(), Moments::default());
    let mut dropped = 0;
    let mut r_min = 0;
    for s in per_sample {
        match s? {
            Some((v, t, e, r)) => {
                m.push(v);
                trunc.push(t);
                sys.push(e);
                r_min = r_min.min(r);
            }
            None => dropped += 1,
        }
    }
    if dropped as f64 > MAX_DROPPED_FRACTION * n_samples as f64 {
        return Err(Error::TooManyDropped {
            dropped,
            total: n_samples,
        });
    }
    let mut estimate = LyapunovEstimate::new(
        Method::QuenchedMc,
        m.mean(),
        m.std_err(),
        m.count as usize,
        EstimateParams {
            r: Some(r_min),
            seed,
            tol: Some(tol),
            ..EstimateParams::default()
        },
    );
    estimate.trunc_bias = trunc.mean();
    estimate.dropped = dropped;
    Ok(ReducedAlpha {
        estimate,
        systematic: sys.mean(),
    })
}

fn window_f<F: PotentialField<f64>>(field: &F, r: i64, p: f64) -> Result<f64> {
    log_survival_profile(field, r, 0, 1, |_| p)
}

/// Finite law of the midpoint `rho` at one site type, by enumerating every potential
/// configuration of the explicitly visited vertices. Atoms are merged by value.
pub fn effective_site_law(
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    site: SiteType,
    cap: u64,
) -> Result<Vec<(f64, f64)>> {
    let atoms = dist.atoms().ok_or_else(|| Error::UnsupportedDistribution {
        op: "effective_site_law",
        reason: "law has no finite support".into(),
    })?;
    if atoms.len() == 1 {
        let h = excursion_survival_h(cfg, &ConstantVertices(atoms[0].0), site)?;
        return Ok(vec![(RhoPotential::from_bracket(0, h).midpoint(), 1.0)]);
    }
    let seen = RefCell::new(Vec::new());
    excursion_survival_h(
        cfg,
        &FnVertices(|k| {
            seen.borrow_mut().push(k);
            0.0
        }),
        site,
    )?;
    let mut keys = seen.into_inner();
    keys.sort_unstable();
    keys.dedup();
    let laws = vec![atoms; keys.len()];
    let configs = (laws[0].len() as f64).powi(keys.len() as i32);
    if configs > cap as f64 {
        return Err(Error::EnumerationCap { configs, cap });
    }
    let mut out: Vec<(f64, f64)> = Vec::new();
    let total = configs as u64;
    let m = laws[0].len() as u64;
    for idx in 0..total {
        let mut rest = idx;
        let mut weight = 1.0;
        let mut values = Vec::with_capacity(keys.len());
        for law in &laws {
            let (v, w) = law[(rest % m) as usize];
            rest /= m;
            values.push(v);
            weight *= w;
        }
        let field = FnVertices(|k| values[keys.binary_search(&k).expect("key recorded")]);
        let h = excursion_survival_h(cfg, &field, site)?;
        out.push((RhoPotential::from_bracket(0, h).midpoint(), weight));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (v, w) in out {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += w,
            _ => merged.push((v, w)),
        }
    }
    Ok(merged)
}

/// Annealed side of a turning-point decomposition on the effective model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealedTurning {
    pub barrier: i64,
    /// `B(x_0, x_n)`.
    pub b_total: f64,
    /// `B(x_k, x_n)`.
    pub b_tail: f64,
    /// `-ln E[C]`.
    pub neg_ln_mean_c: f64,
    /// `B(x_0, x_n) >= B(x_k, x_n)`.
    pub lower_holds: bool,
    /// `B(x_0, x_n) <= -ln E[C] + B(x_k, x_n)`.
    pub upper_holds: bool,
}

/// `A(x_0, x_n) = -ln C + A(x_k, x_n)` along a turning-point geodesic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurningDecomposition {
    pub spec: GeodesicSpec,
    pub barrier: i64,
    /// The geodesic was replaced by the ray from `x_k` through the target.
    pub cut_to_ray: bool,
    pub a_total: f64,
    /// `-ln C(omega)` with `C = e(x_0, x_k)` on the uphill segment.
    pub neg_ln_c: f64,
    pub a_tail: f64,
    pub additivity_residual: f64,
    pub annealed: Option<AnnealedTurning>,
}

/// Quenched decomposition in environment `sample`, with the barrier at `barrier`.
/// For `k <= start` the geodesic is cut at `x_k` and the walk runs on the
/// downhill ray, so `C = 1`.
pub fn turning_point_decompose(
    spec: &GeodesicSpec,
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    barrier: i64,
    seed: u64,
    sample: u64,
) -> Result<TurningDecomposition> {
    spec.validate()?;
    let (x0, xn) = (spec.start_index, spec.target_index);
    if barrier >= x0 {
        return Err(Error::IllPosedWindow(format!(
            "barrier {barrier} must lie left of start {x0}"
        )));
    }
    let (shape, k) = match spec.kind {
        GeodesicKind::Monotone => (LineShape::Uphill, x0),
        GeodesicKind::TurningPoint { turning_index_k: k } if k <= x0 => (LineShape::Downhill, x0),
        GeodesicKind::TurningPoint { turning_index_k: k } => (LineShape::Turning(k), k),
    };
    let field = RhoField::new(cfg, dist, seed, sample, shape)?;
    let step = |i: i64| shape.step_right(cfg, i);
    let a_total = log_survival_profile(&field, barrier, x0, xn, step)?;
    let neg_ln_c = log_survival_profile(&field, barrier, x0, k, step)?;
    let a_tail = log_survival_profile(&field, barrier, k, xn, step)?;
    Ok(TurningDecomposition {
        spec: *spec,
        barrier,
        cut_to_ray: matches!(shape, LineShape::Downhill),
        a_total,
        neg_ln_c,
        a_tail,
        additivity_residual: (a_total - neg_ln_c - a_tail).abs(),
        annealed: None,
    })
}

/// Annealed orderings of the decomposition by exact enumeration of the effective
/// site laws on the window `barrier+1 .. target-1`.
pub fn turning_point_annealed(
    spec: &GeodesicSpec,
    cfg: &TreeConfig,
    dist: &PotentialDistribution<f64>,
    barrier: i64,
    cap: u64,
) -> Result<AnnealedTurning> {
    spec.validate()?;
    let (x0, xn) = (spec.start_index, spec.target_index);
    if barrier >= x0 {
        return Err(Error::IllPosedWindow(format!(
            "barrier {barrier} must lie left of start {x0}"
        )));
    }
    let (shape, k) = match spec.kind {
        GeodesicKind::TurningPoint { turning_index_k: k } if k > x0 => (LineShape::Turning(k), k),
        GeodesicKind::TurningPoint { .. } => (LineShape::Downhill, x0),
        GeodesicKind::Monotone => (LineShape::Uphill, x0),
    };
    let mono = effective_site_law(cfg, dist, SiteType::Monotone, cap)?;
    let turn = match shape {
        LineShape::Turning(_) => effective_site_law(cfg, dist, SiteType::Turning, cap)?,
        _ => mono.clone(),
    };
    let laws: Vec<Vec<(f64, f64)>> = ((barrier + 1)..xn)
        .map(|i| {
            if shape.site_type(i) == SiteType::Turning {
                turn.clone()
            } else {
                mono.clone()
            }
        })
        .collect();
    let lo = barrier + 1;
    let [e_total, e_tail, e_c] = enumerate_product(&laws, cap, |values| {
        let view = crate::env::WindowView { lo, values };
        let step = |i: i64| shape.step_right(cfg, i);
        let a = |x, y| log_survival_profile(&view, barrier, x, y, step).expect("window covers the sweep");
        [(-a(x0, xn)).exp(), (-a(k, xn)).exp(), (-a(x0, k)).exp()]
    })?;
    let (b_total, b_tail, neg_ln_mean_c) = (-e_total.ln(), -e_tail.ln(), -e_c.ln());
    let slack = 1e-12 * b_total.abs().max(1.0);
    Ok(AnnealedTurning {
        barrier,
        b_total,
        b_tail,
        neg_ln_mean_c,
        lower_holds: b_total >= b_tail - slack,
        upper_holds: b_total <= neg_ln_mean_c + b_tail + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bern() -> PotentialDistribution<f64> {
        PotentialDistribution::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap()
    }

    #[test]
    fn closed_forms() {
        assert_eq!(first_passage_gf(3, 1.0), 0.5);
        assert!((first_passage_gf(4, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(first_passage_gf(5, 0.0), 0.0);
        assert!((sigma_finite_prob(3) - 0.8).abs() < 1e-15);
        assert!((sigma_finite_prob(4) - 0.6).abs() < 1e-15);
        for d in 3..=10 {
            assert!(l_recursion_residual(d) < 1e-12);
            assert!((l_gf(d, 1.0) - sigma_finite_prob(d)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TreeConfig::new(2, 0.5, 3).is_err());
        assert!(TreeConfig::new(3, 1.0, 3).is_err());
        assert!(TreeConfig::new(3, 0.5, 0).is_err());
    }

    #[test]
    fn step_probabilities() {
        let sym = TreeConfig::symmetric(5, 4).unwrap();
        assert_eq!(geodesic_step_prob(&sym), 0.5);
        let c = TreeConfig::new(3, 0.5, 4).unwrap();
        assert!((geodesic_step_prob(&c) - 2.0 / 3.0).abs() < 1e-15);
        let c = TreeConfig::new(3, 1.0 - 1e-12, 4).unwrap();
        assert!(geodesic_step_prob(&c) > 1.0 - 1e-11);
    }

    #[test]
    fn free_weights_are_fixed_points() {
        for &(d, p) in &[(3, 1.0 / 3.0), (4, 0.25), (3, 0.5), (4, 0.7), (5, 0.1)] {
            let cfg = TreeConfig::new(d, p, 5).unwrap();
            let (p, c) = (cfg.parent_prob(), cfg.child_prob());
            let w = cfg.free_branch_weight();
            assert!((w - p / (1.0 - f64::from(d - 1) * c * w)).abs() < 1e-12);
            let u = cfg.free_upward_weight();
            let rhs = c / (1.0 - p * u - f64::from(d - 2) * c * w);
            assert!((u - rhs).abs() < 1e-12, "d={d} p={p}: {u} vs {rhs}");
        }
        let sym = TreeConfig::symmetric(4, 5).unwrap();
        assert!((sym.free_upward_weight() - sym.free_branch_weight()).abs() < 1e-12);
    }

    #[test]
    fn zero_potential_h_is_l1() {
        for d in [3, 4] {
            let cfg = TreeConfig::symmetric(d, 80).unwrap();
            let h = excursion_survival_h(&cfg, &ConstantVertices(0.0), SiteType::Monotone).unwrap();
            assert!((h.lower - sigma_finite_prob(d)).abs() < 1e-12);
            assert!((h.upper - sigma_finite_prob(d)).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_root_potential_kills() {
        let cfg = TreeConfig::symmetric(3, 6).unwrap();
        let field = FnVertices(|k: u64| if k == child_key(SITE_KEY, 0) { 1e3 } else { 0.0 });
        let w = branch_return_weight(&cfg, &field, child_key(SITE_KEY, 0)).unwrap();
        assert!(w.upper < 1e-300);
    }

    #[test]
    fn keyed_matches_homogeneous_for_constant_law() {
        let cfg = TreeConfig::symmetric(3, 8).unwrap();
        let h1 = excursion_survival_h(&cfg, &ConstantVertices(0.4), SiteType::Turning).unwrap();
        let h2 = excursion_survival_h(&cfg, &FnVertices(|_| 0.4), SiteType::Turning).unwrap();
        assert!((h1.lower - h2.lower).abs() < 1e-14);
        assert!((h1.upper - h2.upper).abs() < 1e-14);
    }

    #[test]
    fn symmetric_turning_site_matches_monotone() {
        let cfg = TreeConfig::symmetric(4, 60).unwrap();
        let a = excursion_survival_h(&cfg, &ConstantVertices(0.3), SiteType::Monotone).unwrap();
        let b = excursion_survival_h(&cfg, &ConstantVertices(0.3), SiteType::Turning).unwrap();
        assert!(a.width() < 1e-12 && b.width() < 1e-12);
        assert!((a.midpoint() - b.midpoint()).abs() < 1e-12);
    }

    #[test]
    fn dfs_cap_is_enforced() {
        let cfg = TreeConfig::symmetric(3, 40).unwrap();
        let field = KeyedVertices::for_site(&bern(), 1, 0, 0);
        assert!(excursion_survival_h(&cfg, &field, SiteType::Monotone).is_err());
    }

    #[test]
    fn drifted_reduction_at_one_over_d_is_symmetric() {
        let a = TreeConfig::symmetric(3, 6).unwrap();
        let b = TreeConfig::new(3, 1.0 / 3.0, 6).unwrap();
        let ra = reduce_to_line(&a, &bern(), -3, 3, 5, 0).unwrap();
        let rb = reduce_to_line(&b, &bern(), -3, 3, 5, 0).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(rb.step_right_prob, 0.5);
    }

    #[test]
    fn delta_zero_rho() {
        let d0 = PotentialDistribution::point_mass(0.0).unwrap();
        let cfg = TreeConfig::symmetric(3, 60).unwrap();
        for r in rho_sequence(&cfg, &d0, 5, 1).unwrap() {
            assert!((r.midpoint() + 0.8f64.ln()).abs() < 1e-12);
            assert!(r.rho_upper <= 1.5f64.ln());
        }
    }

    #[test]
    fn sites_do_not_share_streams() {
        let cfg = TreeConfig::symmetric(3, 5).unwrap();
        let a = site_rho(&cfg, &bern(), 9, 0, 2, SiteType::Monotone).unwrap();
        let b = rho_window(&cfg, &bern(), -4, 4, 9, 0).unwrap();
        assert_eq!(a, b[6]);
        let other = rho_window(&cfg, &bern(), -4, 4, 9, 1).unwrap();
        assert_ne!(b, other);
    }

    #[test]
    fn turning_decomposition_is_additive() {
        let cfg = TreeConfig::new(3, 0.5, 5).unwrap();
        let spec = GeodesicSpec::turning(3, 0, 6);
        let dec = turning_point_decompose(&spec, &cfg, &bern(), -10, 4, 0).unwrap();
        assert!(dec.additivity_residual < 1e-12);
        assert!(dec.neg_ln_c > 0.0);
        let trivial = turning_point_decompose(&GeodesicSpec::turning(0, 0, 4), &cfg, &bern(), -10, 4, 0).unwrap();
        assert_eq!(trivial.neg_ln_c, 0.0);
        assert!(trivial.cut_to_ray);
        assert!(turning_point_decompose(&GeodesicSpec::turning(9, 0, 4), &cfg, &bern(), -10, 4, 0).is_err());
    }

    #[test]
    fn effective_law_sums_to_one() {
        let cfg = TreeConfig::symmetric(3, 2).unwrap();
        let law = effective_site_law(&cfg, &bern(), SiteType::Monotone, 1 << 16).unwrap();
        let total: f64 = law.iter().map(|a| a.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(law.len() > 2);
    }
}
