//! Relative entropy of product measures and the sandwich check of the variational
//! formula `beta(1) = inf_Q { E^Q[F] + H(Q|P) }` over tilted product measures.

use serde::{Deserialize, Serialize};

use crate::env::PotentialDistribution;
use crate::error::{Error, Result};
use crate::lyapunov::{estimate_alpha_mc, AlphaConfig, LyapunovEstimate};
use crate::scalar::Scalar;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn finite_atoms<T: Scalar>(d: &PotentialDistribution<T>, op: &'static str) -> Result<Vec<(T, T)>> {
    d.atoms().ok_or_else(|| Error::UnsupportedDistribution {
        op,
        reason: "finite support required".into(),
    })
}

/// `KL(q | p) = sum q_i ln(q_i / p_i)`, `+inf` when `q` charges a value outside the support of `p`.
pub fn kl_divergence<T: Scalar>(q: &PotentialDistribution<T>, p: &PotentialDistribution<T>) -> Result<T> {
    let qa = finite_atoms(q, "kl_divergence")?;
    let pa = finite_atoms(p, "kl_divergence")?;
    let mut total = T::zero();
    for &(v, qw) in &qa {
        if qw == T::zero() {
            continue;
        }
        match pa.iter().find(|a| a.0 == v) {
            Some(&(_, pw)) => total = total + qw * (qw / pw).ln(),
            None => return Ok(T::infinity()),
        }
    }
    Ok(total.max(T::zero()))
}

/// Specific relative entropy of the product measure with marginal `q` with respect
/// to the product with marginal `p`: the window entropy is exactly `|I|` times the
/// single-site divergence, so the per-site value is returned.
pub fn specific_entropy_product<T: Scalar>(q: &PotentialDistribution<T>, p: &PotentialDistribution<T>) -> Result<T> {
    kl_divergence(q, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TiltFamily {
    FreeSimplex,
    ExponentialTilt { theta: f64 },
}

/// An i.i.d. law whose marginal reweights the base marginal on the same support.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltedProductMeasure {
    base: PotentialDistribution<f64>,
    tilt: PotentialDistribution<f64>,
    family: TiltFamily,
}

impl TiltedProductMeasure {
    /// Marginal weights proportional to `w_i exp(-theta v_i)`. `theta = 0` returns
    /// the base law unchanged, bit for bit.
    pub fn exponential(base: &PotentialDistribution<f64>, theta: f64) -> Result<Self> {
        let atoms = finite_atoms(base, "exponential tilt")?;
        if !theta.is_finite() {
            return Err(Error::InvalidParameter {
                name: "theta",
                reason: format!("must be finite, got {theta}"),
            });
        }
        let tilt = if theta == 0.0 || atoms.len() == 1 {
            base.clone()
        } else {
            let logs: Vec<f64> = atoms.iter().map(|&(v, w)| w.ln() - theta * v).collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tilted: Vec<(f64, f64)> = atoms
                .iter()
                .zip(&logs)
                .map(|(&(v, _), &l)| (v, (l - top).exp()))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            PotentialDistribution::from_positive_weights(&tilted)
        };
        Ok(Self {
            base: base.clone(),
            tilt,
            family: TiltFamily::ExponentialTilt { theta },
        })
    }

    /// Arbitrary positive weights on the base support (one per base atom, in
    /// increasing value order); normalized internally.
    pub fn free_simplex(base: &PotentialDistribution<f64>, weights: &[f64]) -> Result<Self> {
        let atoms = finite_atoms(base, "free simplex")?;
        if weights.len() != atoms.len() {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: format!("expected {} weights, got {}", atoms.len(), weights.len()),
            });
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: "weights must be finite, nonnegative and not all zero".into(),
            });
        }
        let tilted: Vec<(f64, f64)> = atoms
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&(v, _), &w)| (v, w))
            .collect();
        Ok(Self {
            base: base.clone(),
            tilt: PotentialDistribution::from_positive_weights(&tilted),
            family: TiltFamily::FreeSimplex,
        })
    }

    pub fn base(&self) -> &PotentialDistribution<f64> {
        &self.base
    }

    pub fn tilt(&self) -> &PotentialDistribution<f64> {
        &self.tilt
    }

    pub fn family(&self) -> &TiltFamily {
        &self.family
    }

    pub fn theta(&self) -> Option<f64> {
        match self.family {
            TiltFamily::ExponentialTilt { theta } => Some(theta),
            TiltFamily::FreeSimplex => None,
        }
    }

    /// `H(Q|P)` per site.
    pub fn kl_per_site(&self) -> Result<f64> {
        specific_entropy_product(&self.tilt, &self.base)
    }
}

/// `E^Q[F]` by Monte Carlo. Environments are drawn by inverse CDF from the same
/// keyed uniforms as the base estimator, so `Q = P` reproduces `estimate_alpha_mc`
/// exactly and the estimate is a monotone, smooth-in-mean function of the tilt.
pub fn expected_f_under(q: &TiltedProductMeasure, cfg: &AlphaConfig) -> Result<LyapunovEstimate> {
    estimate_alpha_mc(&q.tilt, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyChoice {
    ExponentialTilt,
    FreeSimplex,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    /// Tilt bracket; `None` derives it from `min_atom_weight`.
    pub theta_range: Option<(f64, f64)>,
    /// Smallest tilted atom weight allowed at the ends of the derived bracket.
    pub min_atom_weight: f64,
    pub grid_points: usize,
    pub param_tol: f64,
    pub max_evals: usize,
    pub alpha: AlphaConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            theta_range: None,
            min_atom_weight: 1e-2,
            grid_points: 21,
            param_tol: 1e-4,
            max_evals: 200,
            alpha: AlphaConfig {
                n_samples: 10_000,
                ..AlphaConfig::default()
            },
        }
    }
}

/// One evaluated tilt: the columns of the objective-curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Tilt parameter; for the free simplex, the evaluation index.
    pub theta: f64,
    #[serde(rename = "E_Q_F")]
    pub e_q_f: f64,
    /// 95% half-width of `E_Q_F`.
    pub e_q_f_ci: f64,
    pub kl_per_site: f64,
    pub objective: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalReport {
    pub alpha_hat: LyapunovEstimate,
    pub beta_hat: LyapunovEstimate,
    pub var_min_value: f64,
    /// Statistical plus truncation error of `E_Q_F` at the minimizer.
    pub var_min_err: f64,
    pub var_min_tilt: TiltedProductMeasure,
    /// Sorted by `theta` for the exponential family, by evaluation order otherwise.
    pub objective_curve: Vec<CurvePoint>,
    pub converged: bool,
    pub evaluations: usize,
}

impl VariationalReport {
    /// `beta_hat - eps`: the minimum must not fall below this.
    pub fn lower_bound(&self) -> f64 {
        self.beta_hat.value - self.beta_hat.error_budget() - self.var_min_err
    }

    /// `alpha_hat + eps`: attained at `Q = P`.
    pub fn upper_bound(&self) -> f64 {
        self.alpha_hat.value + self.alpha_hat.error_budget() + self.var_min_err
    }

    pub fn sandwich_holds(&self) -> bool {
        self.lower_bound() <= self.var_min_value && self.var_min_value <= self.upper_bound()
    }

    /// `min - beta_hat`, reported as data.
    pub fn gap(&self) -> f64 {
        self.var_min_value - self.beta_hat.value
    }
}

struct Evaluator<'a> {
    base: &'a PotentialDistribution<f64>,
    cfg: &'a OptimizerConfig,
    points: Vec<(CurvePoint, TiltedProductMeasure, f64)>,
}

impl Evaluator<'_> {
    fn eval(&mut self, q: TiltedProductMeasure, label: f64) -> Result<f64> {
        if let Some((p, _, _)) = self.points.iter().find(|(p, _, _)| p.theta == label) {
            return Ok(p.objective);
        }
        let est = expected_f_under(&q, &self.cfg.alpha)?;
        let kl = q.kl_per_site()?;
        let objective = est.value + kl;
        let weights = q.tilt.atoms().unwrap_or_default();
        let base_atoms = self.base.atoms().unwrap_or_default();
        let weights = base_atoms
            .iter()
            .map(|&(v, _)| weights.iter().find(|a| a.0 == v).map(|a| a.1).unwrap_or(0.0))
            .collect();
        self.points.push((
            CurvePoint {
                theta: label,
                e_q_f: est.value,
                e_q_f_ci: est.ci_halfwidth,
                kl_per_site: kl,
                objective,
                weights,
            },
            q,
            est.error_budget(),
        ));
        Ok(objective)
    }

    fn eval_theta(&mut self, theta: f64) -> Result<f64> {
        let q = TiltedProductMeasure::exponential(self.base, theta)?;
        self.eval(q, theta)
    }
}

/// Tilt parameter at which the lightest tilted atom weighs exactly `min_weight`,
/// searched on the side given by `sign`.
fn theta_limit(base: &PotentialDistribution<f64>, min_weight: f64, sign: f64) -> Result<f64> {
    let min_w = |theta: f64| -> Result<f64> {
        let q = TiltedProductMeasure::exponential(base, theta)?;
        Ok(q.tilt
            .atoms()
            .unwrap_or_default()
            .iter()
            .map(|a| a.1)
            .fold(1.0, f64::min))
    };
    let mut hi = 1.0;
    while min_w(sign * hi)? > min_weight && hi < 1e4 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if min_w(sign * mid)? > min_weight {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(sign * lo)
}

fn tilt_bracket(base: &PotentialDistribution<f64>, cfg: &OptimizerConfig) -> Result<(f64, f64)> {
    if let Some((lo, hi)) = cfg.theta_range {
        if !(lo <= 0.0 && 0.0 <= hi) {
            return Err(Error::InvalidParameter {
                name: "theta_range",
                reason: format!("bracket [{lo}, {hi}] must contain 0"),
            });
        }
        return Ok((lo, hi));
    }
    let atoms = finite_atoms(base, "minimize_variational")?;
    if atoms.len() == 1 {
        return Ok((0.0, 0.0));
    }
    let min_base = atoms.iter().map(|a| a.1).fold(1.0, f64::min);
    if min_base <= cfg.min_atom_weight {
        return Ok((0.0, 0.0));
    }
    Ok((
        theta_limit(base, cfg.min_atom_weight, -1.0)?,
        theta_limit(base, cfg.min_atom_weight, 1.0)?,
    ))
}

fn minimize_exponential(ev: &mut Evaluator<'_>) -> Result<bool> {
    let cfg = ev.cfg;
    let (lo, hi) = tilt_bracket(ev.base, cfg)?;
    let n = cfg.grid_points.max(3);
    let mut grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    grid.push(0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut values = Vec::with_capacity(grid.len());
    for &t in &grid {
        if ev.points.len() >= cfg.max_evals {
            return Ok(false);
        }
        values.push(ev.eval_theta(t)?);
    }
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];
    if b - a <= cfg.param_tol {
        return Ok(true);
    }
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = ev.eval_theta(c)?;
    let mut fd = ev.eval_theta(d)?;
    while b - a > cfg.param_tol {
        if ev.points.len() >= cfg.max_evals {
            return Ok(false);
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = ev.eval_theta(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = ev.eval_theta(d)?;
        }
    }
    Ok(true)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Nelder-Mead on the logits of the tilted weights (first logit pinned to the base).
fn minimize_simplex(ev: &mut Evaluator<'_>) -> Result<bool> {
    let cfg = ev.cfg;
    let atoms = finite_atoms(ev.base, "free simplex")?;
    if atoms.len() > 4 {
        return Err(Error::UnsupportedDistribution {
            op: "free simplex",
            reason: format!("at most 4 atoms supported, got {}", atoms.len()),
        });
    }
    let base_logits: Vec<f64> = atoms.iter().map(|a| a.1.ln()).collect();
    let dim = atoms.len() - 1;
    let base_owned = ev.base.clone();
    let f = |x: &[f64], ev: &mut Evaluator<'_>| -> Result<f64> {
        let mut logits = base_logits.clone();
        for (l, dx) in logits[1..].iter_mut().zip(x) {
            *l += dx;
        }
        let weights = softmax(&logits);
        let label = ev.points.len() as f64;
        let q = if x.iter().all(|&v| v == 0.0) {
            TiltedProductMeasure {
                base: base_owned.clone(),
                tilt: base_owned.clone(),
                family: TiltFamily::FreeSimplex,
            }
        } else {
            TiltedProductMeasure::free_simplex(&base_owned, &weights)?
        };
        ev.eval(q, label)
    };
    if dim == 0 {
        f(&[], ev)?;
        return Ok(true);
    }
    let mut simplex: Vec<Vec<f64>> = vec![vec![0.0; dim]];
    for i in 0..dim {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        simplex.push(v);
    }
    let mut fvals = Vec::with_capacity(dim + 1);
    for v in &simplex {
        fvals.push(f(v, ev)?);
    }
    loop {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&i, &j| fvals[i].total_cmp(&fvals[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fvals = order.iter().map(|&i| fvals[i]).collect();
        let size = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if size < cfg.param_tol {
            return Ok(true);
        }
        if ev.points.len() + 2 > cfg.max_evals {
            return Ok(false);
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|v| v[k]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr, ev)?;
        if fr < fvals[0] {
            let xe = along(-2.0);
            let fe = f(&xe, ev)?;
            if fe < fr {
                simplex[dim] = xe;
                fvals[dim] = fe;
            } else {
                simplex[dim] = xr;
                fvals[dim] = fr;
            }
        } else if fr < fvals[dim - 1] {
            simplex[dim] = xr;
            fvals[dim] = fr;
        } else {
            let xc = if fr < fvals[dim] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc, ev)?;
            if fc < fvals[dim].min(fr) {
                simplex[dim] = xc;
                fvals[dim] = fc;
            } else {
                for i in 1..=dim {
                    let shrunk: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(v, b)| b + 0.5 * (v - b))
                        .collect();
                    fvals[i] = f(&shrunk, ev)?;
                    simplex[i] = shrunk;
                }
            }
        }
    }
}

/// Minimizes `E^{Q}[F] + H(Q|P)` over the chosen product family with common
/// random numbers and reports the sandwich against the supplied estimates.
pub fn minimize_variational(
    base: &PotentialDistribution<f64>,
    family: FamilyChoice,
    cfg: &OptimizerConfig,
    alpha_hat: &LyapunovEstimate,
    beta_hat: &LyapunovEstimate,
) -> Result<VariationalReport> {
    finite_atoms(base, "minimize_variational")?;
    let mut ev = Evaluator {
        base,
        cfg,
        points: Vec::new(),
    };
    let converged = match family {
        FamilyChoice::ExponentialTilt => minimize_exponential(&mut ev)?,
        FamilyChoice::FreeSimplex => minimize_simplex(&mut ev)?,
    };
    let evaluations = ev.points.len();
    let mut points = ev.points;
    if family == FamilyChoice::ExponentialTilt {
        points.sort_by(|a, b| a.0.theta.total_cmp(&b.0.theta));
    }
    let (best_point, best_tilt, best_err) = points
        .iter()
        .min_by(|a, b| a.0.objective.total_cmp(&b.0.objective))
        .cloned()
        .ok_or_else(|| Error::DegenerateEstimate("no objective evaluations".into()))?;
    Ok(VariationalReport {
        alpha_hat: alpha_hat.clone(),
        beta_hat: beta_hat.clone(),
        var_min_value: best_point.objective,
        var_min_err: best_err,
        var_min_tilt: best_tilt,
        objective_curve: points.into_iter().map(|p| p.0).collect(),
        converged,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bern() -> PotentialDistribution<f64> {
        PotentialDistribution::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap()
    }

    #[test]
    fn kl_self_is_zero() {
        assert_eq!(kl_divergence(&bern(), &bern()).unwrap(), 0.0);
    }

    #[test]
    fn kl_two_atoms() {
        let p = PotentialDistribution::finite(&[(0.0, 0.75), (1.0, 0.25)]).unwrap();
        let got = kl_divergence(&bern(), &p).unwrap();
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.143_841_036_225_890_2).abs() < 1e-12);
    }

    #[test]
    fn kl_outside_support_is_infinite() {
        let q = PotentialDistribution::finite(&[(0.0, 0.5), (2.0, 0.5)]).unwrap();
        assert_eq!(kl_divergence(&q, &bern()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_rejects_continuous() {
        let e = PotentialDistribution::exponential(1.0).unwrap();
        assert!(kl_divergence(&e, &bern()).is_err());
    }

    #[test]
    fn kl_generic_f32() {
        let q = PotentialDistribution::<f32>::finite(&[(0.0, 0.5), (1.0, 0.5)]).unwrap();
        let p = PotentialDistribution::<f32>::finite(&[(0.0, 0.75), (1.0, 0.25)]).unwrap();
        assert!((kl_divergence(&q, &p).unwrap() - 0.143_841_04f32).abs() < 1e-6);
    }

    #[test]
    fn zero_tilt_is_base() {
        let q = TiltedProductMeasure::exponential(&bern(), 0.0).unwrap();
        assert_eq!(q.tilt(), &bern());
        assert_eq!(q.kl_per_site().unwrap(), 0.0);
    }

    #[test]
    fn exponential_tilt_weights() {
        let q = TiltedProductMeasure::exponential(&bern(), 1.0).unwrap();
        let atoms = q.tilt().atoms().unwrap();
        let e = (-1.0f64).exp();
        assert!((atoms[1].1 - e / (1.0 + e)).abs() < 1e-12);
        assert!((atoms[0].1 + atoms[1].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derived_bracket_respects_min_weight() {
        let cfg = OptimizerConfig::default();
        let (lo, hi) = tilt_bracket(&bern(), &cfg).unwrap();
        // q(theta) = 1 / (1 + e^theta) hits 0.01 at theta = ln 99
        assert!((hi - 99f64.ln()).abs() < 1e-9);
        assert!((lo + 99f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn free_simplex_validation() {
        assert!(TiltedProductMeasure::free_simplex(&bern(), &[1.0]).is_err());
        assert!(TiltedProductMeasure::free_simplex(&bern(), &[0.0, 0.0]).is_err());
        let q = TiltedProductMeasure::free_simplex(&bern(), &[3.0, 1.0]).unwrap();
        assert_eq!(q.tilt().atoms().unwrap(), vec![(0.0, 0.75), (1.0, 0.25)]);
    }
}
