//! Exact survival quantities for killed nearest-neighbour walks on integer windows.
//!
//! The boundary-value problem `u(y) = 1`, `u(r) = 0`,
//! `u(x) = exp(-omega(x)) * (p u(x+1) + (1-p) u(x-1))` is solved by the forward
//! sweep of tridiagonal elimination started at the absorbing barrier. The sweep
//! produces the one-step ratios `q(j) = u(j)/u(j+1) = e_r(j, j+1)`, so every
//! two-point value is a product of ratios and is accumulated in log space.

use rayon::prelude::*;

use crate::env::{Environment, PotentialField};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tridiag::solve_tridiagonal;

/// Survival weights below this are reported as zero with `underflow` set.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

/// A killed-walk boundary-value problem on a finite window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowModel<T> {
    pub env: Environment<T>,
    pub barrier_r: i64,
    pub target_y: i64,
    pub start_x: i64,
    pub step_right_prob: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurvivalResult<T> {
    pub e_value: T,
    /// `-ln e_value`, computed directly in log space.
    pub a_value: T,
    pub barrier_r: i64,
    pub converged: bool,
    pub r_used: i64,
    /// `e_value` fell below [`UNDERFLOW_FLOOR`] and was clamped to zero.
    pub underflow: bool,
    /// Upper bound on `a_value - a` with the barrier removed (zero when not computed).
    pub trunc_bound: T,
}

impl<T: Scalar> SurvivalResult<T> {
    fn from_log(a_value: T, barrier_r: i64) -> Self {
        let e = (-a_value).exp();
        let underflow = e.as_f64() < UNDERFLOW_FLOOR;
        Self {
            e_value: if underflow { T::zero() } else { e },
            a_value,
            barrier_r,
            converged: true,
            r_used: barrier_r,
            underflow,
            trunc_bound: T::zero(),
        }
    }
}

/// Parameters of the barrier-doubling limit `r -> -infinity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitConfig<T> {
    pub tol: T,
    pub r_start: i64,
    pub r_max: i64,
    pub step_right_prob: T,
}

impl<T: Scalar> Default for LimitConfig<T> {
    fn default() -> Self {
        Self {
            tol: T::of(1e-9),
            r_start: -2,
            r_max: -(1 << 20),
            step_right_prob: T::of(0.5),
        }
    }
}

fn check_prob<T: Scalar>(p: T) -> Result<()> {
    if p > T::zero() && p < T::one() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "step_right_prob",
            reason: format!("must lie in (0, 1), got {p}"),
        })
    }
}

#[inline]
fn site<T, F: PotentialField<T>>(field: &F, x: i64) -> Result<T> {
    field.potential(x).ok_or_else(|| {
        let (lo, hi) = field.bounds();
        Error::WindowTooSmall { lo, hi, site: x }
    })
}

/// One elimination step: `-ln q(j)` from `omega(j)`, the right-step probability and `q(j-1)`.
#[inline]
fn log_ratio_step<T: Scalar>(omega: T, p: T, q_prev: T) -> T {
    if omega == T::infinity() {
        return T::infinity();
    }
    let w = (-omega).exp();
    omega - p.ln() + (-(T::one() - p) * w * q_prev).ln_1p()
}

/// `-ln e_r(j, j+1)` for `j = from..to` with the absorbing barrier at `barrier`,
/// and a site-dependent probability of stepping right.
pub fn step_increments_profile<T, F, P>(field: &F, barrier: i64, from: i64, to: i64, step: P) -> Result<Vec<T>>
where
    T: Scalar,
    F: PotentialField<T>,
    P: Fn(i64) -> T,
{
    if from <= barrier {
        return Err(Error::IllPosedWindow(format!(
            "start {from} must lie strictly right of the barrier {barrier}"
        )));
    }
    let mut out = Vec::with_capacity((to - from).max(0) as usize);
    let mut q_prev = T::zero();
    for j in (barrier + 1)..to {
        let a = log_ratio_step(site(field, j)?, step(j), q_prev);
        q_prev = (-a).exp();
        if j >= from {
            out.push(a);
        }
    }
    Ok(out)
}

/// [`step_increments_profile`] with a constant right-step probability.
pub fn step_increments<T, F>(field: &F, barrier: i64, from: i64, to: i64, p: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: PotentialField<T>,
{
    check_prob(p)?;
    step_increments_profile(field, barrier, from, to, |_| p)
}

/// `a_r(x, y)` for `x <= y` with a site-dependent right-step probability.
pub fn log_survival_profile<T, F, P>(field: &F, barrier: i64, x: i64, y: i64, step: P) -> Result<T>
where
    T: Scalar,
    F: PotentialField<T>,
    P: Fn(i64) -> T,
{
    if y < x {
        return Err(Error::IllPosedWindow(format!("target {y} left of start {x}")));
    }
    if y == x {
        return Ok(T::zero());
    }
    Ok(step_increments_profile(field, barrier, x, y, step)?
        .into_iter()
        .fold(T::zero(), |acc, a| acc + a))
}

/// `-ln` of the killed probability of reaching `stop` before `top`, starting at `start`,
/// with `stop < start < top`. Mirror image of the right-going sweep.
pub(crate) fn log_left_passage<T, F>(field: &F, top: i64, start: i64, stop: i64, p: T) -> Result<T>
where
    T: Scalar,
    F: PotentialField<T>,
{
    let mut q_prev = T::zero();
    let mut total = T::zero();
    let left = T::one() - p;
    for j in ((stop + 1)..top).rev() {
        let a = log_ratio_step(site(field, j)?, left, q_prev);
        q_prev = (-a).exp();
        if j <= start {
            total = total + a;
        }
    }
    Ok(total)
}

fn validate_model<T: Scalar>(m: &WindowModel<T>) -> Result<()> {
    check_prob(m.step_right_prob)?;
    if m.target_y <= m.barrier_r {
        return Err(Error::IllPosedWindow(format!(
            "target {} must lie right of the barrier {}",
            m.target_y, m.barrier_r
        )));
    }
    if m.barrier_r >= m.start_x {
        return Err(Error::IllPosedWindow(format!(
            "barrier {} must lie left of the start {}",
            m.barrier_r, m.start_x
        )));
    }
    if m.target_y < m.start_x {
        return Err(Error::IllPosedWindow(format!(
            "target {} left of start {}: only rightward passage is supported",
            m.target_y, m.start_x
        )));
    }
    m.env.require(m.barrier_r)?;
    m.env.require(m.target_y)?;
    Ok(())
}

/// `e_r(x, y) = E_x[exp(-sum_{k < tau_y} omega(S_k)); tau_y < tau_r]`.
pub fn solve_survival_window<T: Scalar>(model: &WindowModel<T>) -> Result<SurvivalResult<T>> {
    validate_model(model)?;
    let a = log_survival_profile(&model.env, model.barrier_r, model.start_x, model.target_y, |_| {
        model.step_right_prob
    })?;
    Ok(SurvivalResult::from_log(a, model.barrier_r))
}

/// Solves many models, possibly in parallel; results follow input order.
pub fn solve_batch<T: Scalar>(models: &[WindowModel<T>]) -> Vec<Result<SurvivalResult<T>>> {
    models.par_iter().map(solve_survival_window).collect()
}

/// `F_r(omega) = a_r(0, 1)` for the symmetric walk.
pub fn f_r<T: Scalar>(env: &Environment<T>, r: i64) -> Result<SurvivalResult<T>> {
    if r >= 0 {
        return Err(Error::InvalidParameter {
            name: "r",
            reason: format!("barrier must be negative, got {r}"),
        });
    }
    env.require(r)?;
    env.require(1)?;
    f_r_field(env, r, T::of(0.5))
}

fn f_r_field<T: Scalar, F: PotentialField<T>>(field: &F, r: i64, p: T) -> Result<SurvivalResult<T>> {
    let a = step_increments(field, r, 0, 1, p)?[0];
    Ok(SurvivalResult::from_log(a, r))
}

/// Certified bound on `F_r - F`: paths touching `r` contribute at most the killed
/// probability of reaching `r` before 1, relative to `e_r`.
fn truncation_bound<T: Scalar, F: PotentialField<T>>(field: &F, r: i64, f_r_value: T, p: T) -> Result<T> {
    let log_k = log_left_passage(field, 1, 0, r, p)?;
    Ok((f_r_value - log_k).exp().ln_1p())
}

/// `F(omega) = a(0, 1)` by doubling the barrier until `F_r - F_{2r} < tol`.
///
/// Returns the last value with `r_used` and the truncation bound. Laws with no mass
/// off zero converge only like `1/|r|` and end in [`Error::NonConvergence`].
pub fn f_limit<T, F>(source: &F, cfg: &LimitConfig<T>) -> Result<SurvivalResult<T>>
where
    T: Scalar,
    F: PotentialField<T>,
{
    if !(cfg.tol > T::zero()) {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: format!("must be positive, got {}", cfg.tol),
        });
    }
    if cfg.r_start >= 0 || cfg.r_max > cfg.r_start {
        return Err(Error::InvalidParameter {
            name: "r_start",
            reason: format!("need r_max <= r_start < 0, got {} and {}", cfg.r_max, cfg.r_start),
        });
    }
    check_prob(cfg.step_right_prob)?;
    let p = cfg.step_right_prob;
    let mut r = cfg.r_start;
    let mut prev = f_r_field(source, r, p)?;
    let mut last_decrement = f64::NAN;
    loop {
        let next_r = r.saturating_mul(2);
        if next_r < cfg.r_max {
            return Err(Error::NonConvergence {
                r_max: cfg.r_max,
                last_value: prev.a_value.as_f64(),
                last_decrement,
            });
        }
        let cur = f_r_field(source, next_r, p)?;
        let decrement = prev.a_value - cur.a_value;
        if decrement < cfg.tol || !decrement.is_finite() {
            let mut out = cur;
            out.converged = true;
            out.r_used = next_r;
            out.trunc_bound = truncation_bound(source, next_r, cur.a_value, p)?;
            return Ok(out);
        }
        last_decrement = decrement.as_f64();
        prev = cur;
        r = next_r;
    }
}

/// `e_r(x, y)` for the symmetric walk.
pub fn two_point_e<T: Scalar>(env: &Environment<T>, x: i64, y: i64, r: i64) -> Result<T> {
    let a = two_point_a(env, x, y, r)?;
    Ok((-a).exp())
}

/// `a_r(x, y)` for the symmetric walk with absolute barrier `r < min(x, y)`.
pub fn two_point_a<T: Scalar>(env: &Environment<T>, x: i64, y: i64, r: i64) -> Result<T> {
    two_point_a_with(env, x, y, r, T::of(0.5))
}

pub fn two_point_a_with<T: Scalar>(env: &Environment<T>, x: i64, y: i64, r: i64, p: T) -> Result<T> {
    if r >= x.min(y) {
        return Err(Error::IllPosedWindow(format!(
            "barrier {r} must lie left of {x} and {y}"
        )));
    }
    check_prob(p)?;
    if x == y {
        return Ok(T::zero());
    }
    env.require(r)?;
    env.require(y)?;
    log_survival_profile(env, r, x, y, |_| p)
}

/// Green function restricted to paths inside `(r, big_r)`:
/// `g(x, y) = exp(-omega(y)) * [(I - K)^{-1} - I](x, y)` with the killed kernel
/// `K(u, v) = exp(-omega(u)) p(u, v)`.
pub fn green_function_window<T: Scalar>(env: &Environment<T>, x: i64, y: i64, r: i64, big_r: i64, p: T) -> Result<T> {
    check_prob(p)?;
    if !(r < x && x < big_r && r < y && y < big_r) {
        return Err(Error::IllPosedWindow(format!(
            "sites {x}, {y} must lie strictly inside ({r}, {big_r})"
        )));
    }
    let n = (big_r - r - 1) as usize;
    let mut lower = vec![T::zero(); n];
    let mut diag = vec![T::one(); n];
    let mut upper = vec![T::zero(); n];
    let mut rhs = vec![T::zero(); n];
    for (i, s) in ((r + 1)..big_r).enumerate() {
        let w = (-site(env, s)?).exp();
        lower[i] = -(w * (T::one() - p));
        upper[i] = -(w * p);
        diag[i] = T::one();
    }
    rhs[(y - r - 1) as usize] = T::one();
    let column = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let resolvent = column[(x - r - 1) as usize];
    let excess = if x == y { resolvent - T::one() } else { resolvent };
    Ok((-site(env, y)?).exp() * excess.max(T::zero()))
}

/// Drifted gambler's ruin with zero potential: probability to reach `y` before `r` from `x`.
pub fn gamblers_ruin<T: Scalar>(x: i64, y: i64, r: i64, p: T) -> T {
    let half = T::of(0.5);
    if p == half {
        return T::of((x - r) as f64 / (y - r) as f64);
    }
    let rho = (T::one() - p) / p;
    (T::one() - rho.powi((x - r) as i32)) / (T::one() - rho.powi((y - r) as i32))
}
