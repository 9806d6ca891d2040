//! Single-site potential laws, i.i.d. environments on integer windows and the shift.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{zigzag, KeyedStream, SequentialUniforms};
use crate::scalar::Scalar;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Serializable description of a potential law, as found in run configurations.
///
/// ```json
/// {"kind":"finite","atoms":[[0.0,0.5],[1.0,0.5]]}
/// {"kind":"exponential","rate":1.0}
/// {"kind":"point","value":0.2231435513142097}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Finite {
        atoms: Vec<(f64, f64)>,
    },
    Exponential {
        rate: f64,
    },
    #[serde(alias = "point_mass")]
    Point {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistributionKind<T> {
    /// Atoms sorted by strictly increasing value, weights normalized.
    Finite {
        atoms: Vec<(T, T)>,
        cdf: Vec<T>,
    },
    Exponential {
        rate: T,
    },
    PointMass {
        value: T,
    },
}

/// The single-site law of the potential.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialDistribution<T> {
    kind: DistributionKind<T>,
    is_delta_zero: bool,
}

impl<T: Scalar> PotentialDistribution<T> {
    pub fn point_mass(value: T) -> Result<Self> {
        if !(value >= T::zero()) || !value.is_finite() {
            return Err(Error::InvalidDistribution {
                field: "value".into(),
                reason: format!("point mass must be a finite nonnegative value, got {value}"),
            });
        }
        Ok(Self {
            kind: DistributionKind::PointMass { value },
            is_delta_zero: value == T::zero(),
        })
    }

    pub fn exponential(rate: T) -> Result<Self> {
        if !(rate > T::zero()) || !rate.is_finite() {
            return Err(Error::InvalidDistribution {
                field: "rate".into(),
                reason: format!("rate must be positive and finite, got {rate}"),
            });
        }
        Ok(Self {
            kind: DistributionKind::Exponential { rate },
            is_delta_zero: false,
        })
    }

    /// Builds a finite-support law. Atoms are sorted and duplicate values merged;
    /// weights must be positive and sum to one within 1e-12.
    pub fn finite(atoms: &[(T, T)]) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution {
                field: "atoms".into(),
                reason: "empty atom list".into(),
            });
        }
        for (i, &(v, w)) in atoms.iter().enumerate() {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(Error::InvalidDistribution {
                    field: format!("atoms[{i}].value"),
                    reason: format!("atom values must be finite and nonnegative, got {v}"),
                });
            }
            if !(w > T::zero()) || !w.is_finite() {
                return Err(Error::InvalidDistribution {
                    field: format!("atoms[{i}].weight"),
                    reason: format!("atom weights must be positive, got {w}"),
                });
            }
        }
        let total: f64 = atoms.iter().map(|&(_, w)| w.as_f64()).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidDistribution {
                field: "atoms".into(),
                reason: format!("weights sum to {total}, expected 1"),
            });
        }
        Ok(Self::from_positive_weights(atoms))
    }

    /// Normalizes arbitrary positive weights. Callers guarantee validity.
    pub(crate) fn from_positive_weights(atoms: &[(T, T)]) -> Self {
        let mut sorted: Vec<(T, T)> = atoms.to_vec();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite atom values"));
        let mut merged: Vec<(T, T)> = Vec::with_capacity(sorted.len());
        for (v, w) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 = last.1 + w,
                _ => merged.push((v, w)),
            }
        }
        let total = merged.iter().fold(T::zero(), |acc, &(_, w)| acc + w);
        if total != T::one() {
            for atom in &mut merged {
                atom.1 = atom.1 / total;
            }
        }
        let mut cdf = Vec::with_capacity(merged.len());
        let mut acc = T::zero();
        for &(_, w) in &merged {
            acc = acc + w;
            cdf.push(acc);
        }
        let is_delta_zero = merged.len() == 1 && merged[0].0 == T::zero();
        Self {
            kind: DistributionKind::Finite { atoms: merged, cdf },
            is_delta_zero,
        }
    }

    pub fn from_spec(spec: &DistributionSpec) -> Result<Self> {
        let conv = |x: f64, field: &str| {
            T::from_f64(x).ok_or_else(|| Error::InvalidDistribution {
                field: field.to_string(),
                reason: format!("{x} not representable"),
            })
        };
        match spec {
            DistributionSpec::Finite { atoms } => {
                let converted = atoms
                    .iter()
                    .enumerate()
                    .map(|(i, &(v, w))| {
                        Ok((
                            conv(v, &format!("atoms[{i}].value"))?,
                            conv(w, &format!("atoms[{i}].weight"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::finite(&converted)
            }
            DistributionSpec::Exponential { rate } => Self::exponential(conv(*rate, "rate")?),
            DistributionSpec::Point { value } => Self::point_mass(conv(*value, "value")?),
        }
    }

    pub fn to_spec(&self) -> DistributionSpec {
        match &self.kind {
            DistributionKind::Finite { atoms, .. } => DistributionSpec::Finite {
                atoms: atoms.iter().map(|&(v, w)| (v.as_f64(), w.as_f64())).collect(),
            },
            DistributionKind::Exponential { rate } => DistributionSpec::Exponential { rate: rate.as_f64() },
            DistributionKind::PointMass { value } => DistributionSpec::Point { value: value.as_f64() },
        }
    }

    pub fn kind(&self) -> &DistributionKind<T> {
        &self.kind
    }

    /// True iff the law is the Dirac mass at zero ("trivial case": no killing).
    pub fn is_delta_zero(&self) -> bool {
        self.is_delta_zero
    }

    /// Atoms `(value, weight)` for laws with finite support; a point mass is one atom.
    pub fn atoms(&self) -> Option<Vec<(T, T)>> {
        match &self.kind {
            DistributionKind::Finite { atoms, .. } => Some(atoms.clone()),
            DistributionKind::PointMass { value } => Some(vec![(*value, T::one())]),
            DistributionKind::Exponential { .. } => None,
        }
    }

    /// Deterministic laws: a point mass or a single atom.
    pub fn constant_value(&self) -> Option<T> {
        match &self.kind {
            DistributionKind::PointMass { value } => Some(*value),
            DistributionKind::Finite { atoms, .. } if atoms.len() == 1 => Some(atoms[0].0),
            _ => None,
        }
    }

    pub fn mean(&self) -> T {
        match &self.kind {
            DistributionKind::Finite { atoms, .. } => atoms.iter().fold(T::zero(), |acc, &(v, w)| acc + v * w),
            DistributionKind::Exponential { rate } => rate.recip(),
            DistributionKind::PointMass { value } => *value,
        }
    }

    pub fn variance(&self) -> T {
        match &self.kind {
            DistributionKind::Finite { atoms, .. } => {
                let m = self.mean();
                atoms.iter().fold(T::zero(), |acc, &(v, w)| acc + w * (v - m) * (v - m))
            }
            DistributionKind::Exponential { rate } => (*rate * *rate).recip(),
            DistributionKind::PointMass { .. } => T::zero(),
        }
    }

    /// Largest support point, if bounded.
    pub fn max_value(&self) -> Option<T> {
        match &self.kind {
            DistributionKind::Finite { atoms, .. } => atoms.last().map(|a| a.0),
            DistributionKind::Exponential { .. } => None,
            DistributionKind::PointMass { value } => Some(*value),
        }
    }

    /// Laplace transform `E[exp(-ell * omega)]` at a nonnegative integer.
    pub fn laplace_transform(&self, ell: u64) -> T {
        if ell == 0 {
            return T::one();
        }
        let l = T::of(ell as f64);
        match &self.kind {
            DistributionKind::Finite { atoms, .. } => {
                atoms.iter().fold(T::zero(), |acc, &(v, w)| acc + w * (-(l * v)).exp())
            }
            DistributionKind::Exponential { rate } => *rate / (*rate + l),
            DistributionKind::PointMass { value } => (-(l * *value)).exp(),
        }
    }

    /// Inverse CDF at `u` in (0, 1). Monotone in `u`, so shared uniforms couple laws
    /// monotonically.
    pub fn quantile(&self, u: f64) -> T {
        match &self.kind {
            DistributionKind::Finite { atoms, cdf } => {
                let u = T::of(u);
                let idx = cdf.partition_point(|&c| c < u);
                atoms[idx.min(atoms.len() - 1)].0
            }
            DistributionKind::Exponential { rate } => T::of(-(1.0 - u).ln()) / *rate,
            DistributionKind::PointMass { value } => *value,
        }
    }
}

/// Source of site potentials. `None` means the site lies outside the known window.
pub trait PotentialField<T> {
    fn potential(&self, x: i64) -> Option<T>;

    /// Known sites, for error reporting. Unbounded fields keep the default.
    fn bounds(&self) -> (i64, i64) {
        (i64::MIN, i64::MAX)
    }
}

impl<T, F: PotentialField<T> + ?Sized> PotentialField<T> for &F {
    #[inline]
    fn potential(&self, x: i64) -> Option<T> {
        (**self).potential(x)
    }

    fn bounds(&self) -> (i64, i64) {
        (**self).bounds()
    }
}

/// A borrowed window of potentials starting at site `lo`.
#[derive(Clone, Copy, Debug)]
pub struct WindowView<'a, T> {
    pub lo: i64,
    pub values: &'a [T],
}

impl<T: Copy> PotentialField<T> for WindowView<'_, T> {
    #[inline]
    fn potential(&self, x: i64) -> Option<T> {
        let idx = x.checked_sub(self.lo)?;
        usize::try_from(idx).ok().and_then(|i| self.values.get(i).copied())
    }

    fn bounds(&self) -> (i64, i64) {
        (self.lo, self.lo + self.values.len() as i64 - 1)
    }
}

/// Unbounded i.i.d. field; site `x` is drawn from `(seed, stream_id, x)` alone.
#[derive(Clone, Debug)]
pub struct SampledField<T> {
    dist: PotentialDistribution<T>,
    stream: KeyedStream,
    seed: u64,
    stream_id: u64,
}

impl<T: Scalar> SampledField<T> {
    pub fn new(dist: PotentialDistribution<T>, seed: u64, stream_id: u64) -> Self {
        Self {
            dist,
            stream: KeyedStream::new(seed, stream_id),
            seed,
            stream_id,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn uniform(&self, x: i64) -> f64 {
        self.stream.uniform(zigzag(x))
    }

    pub fn realize(&self, lo: i64, hi: i64) -> Result<Environment<T>> {
        sample_environment(&self.dist, lo, hi, self.seed, self.stream_id)
    }
}

impl<T: Scalar> PotentialField<T> for SampledField<T> {
    #[inline]
    fn potential(&self, x: i64) -> Option<T> {
        Some(match self.dist.constant_value() {
            Some(c) => c,
            None => self.dist.quantile(self.uniform(x)),
        })
    }
}

/// Single-threaded caching view of a [`SampledField`], bit-identical to it.
///
/// Sites left of the origin are generated sequentially from the keystream and
/// memoized, which makes repeated sweeps with growing barriers cheap.
#[derive(Debug)]
pub struct LazyField<T> {
    inner: SampledField<T>,
    /// Potentials at sites `0, -1, -2, ...`.
    left: RefCell<Vec<T>>,
    cursor: RefCell<Option<SequentialUniforms>>,
}

impl<T: Scalar> LazyField<T> {
    pub fn new(inner: SampledField<T>) -> Self {
        Self {
            inner,
            left: RefCell::new(Vec::new()),
            cursor: RefCell::new(None),
        }
    }

    fn extend_left(&self, depth: usize) {
        let mut left = self.left.borrow_mut();
        if left.is_empty() {
            left.push(self.inner.potential(0).expect("unbounded field"));
        }
        if left.len() > depth {
            return;
        }
        if let Some(c) = self.inner.dist.constant_value() {
            left.resize(depth + 1, c);
            return;
        }
        let mut cursor = self.cursor.borrow_mut();
        // site -k lives at counter 2k - 1; consecutive left sites are two counters apart
        let rng = cursor.get_or_insert_with(|| self.inner.stream.sequential_from(1));
        while left.len() <= depth {
            let u = rng.next_f64();
            rng.next_u64();
            left.push(self.inner.dist.quantile(u));
        }
    }
}

impl<T: Scalar> PotentialField<T> for LazyField<T> {
    #[inline]
    fn potential(&self, x: i64) -> Option<T> {
        if x > 0 {
            return self.inner.potential(x);
        }
        let depth = x.unsigned_abs() as usize;
        if let Some(&v) = self.left.borrow().get(depth) {
            return Some(v);
        }
        self.extend_left(depth);
        self.left.borrow().get(depth).copied()
    }
}

/// Realized potentials on `[window_lo, window_hi]` with their seed provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment<T> {
    pub window_lo: i64,
    pub window_hi: i64,
    pub values: Vec<T>,
    pub seed: u64,
    pub stream_id: u64,
}

impl<T: Scalar> Environment<T> {
    /// Wraps explicit values; all must be nonnegative (infinity allowed).
    pub fn from_values(window_lo: i64, values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::IllPosedWindow("environment needs at least one site".into()));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= T::zero())) {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: format!("potential at site {} is negative or NaN", window_lo + i as i64),
            });
        }
        let window_hi = window_lo + values.len() as i64 - 1;
        Ok(Self {
            window_lo,
            window_hi,
            values,
            seed: 0,
            stream_id: 0,
        })
    }

    pub fn constant(window_lo: i64, window_hi: i64, value: T) -> Result<Self> {
        if window_lo > window_hi {
            return Err(Error::IllPosedWindow(format!("[{window_lo}, {window_hi}]")));
        }
        Self::from_values(window_lo, vec![value; (window_hi - window_lo + 1) as usize])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn contains(&self, x: i64) -> bool {
        (self.window_lo..=self.window_hi).contains(&x)
    }

    pub fn get(&self, x: i64) -> Option<T> {
        self.view().potential(x)
    }

    pub fn view(&self) -> WindowView<'_, T> {
        WindowView {
            lo: self.window_lo,
            values: &self.values,
        }
    }

    pub fn require(&self, x: i64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::WindowTooSmall {
                lo: self.window_lo,
                hi: self.window_hi,
                site: x,
            })
        }
    }
}

impl<T: Scalar> PotentialField<T> for Environment<T> {
    #[inline]
    fn potential(&self, x: i64) -> Option<T> {
        self.get(x)
    }

    fn bounds(&self) -> (i64, i64) {
        (self.window_lo, self.window_hi)
    }
}

/// Validating constructor from a structured description.
pub fn make_distribution<T: Scalar>(spec: &DistributionSpec) -> Result<PotentialDistribution<T>> {
    PotentialDistribution::from_spec(spec)
}

/// i.i.d. draws on `[lo, hi]`; the value at `x` depends only on `(seed, stream_id, x)`.
pub fn sample_environment<T: Scalar>(
    dist: &PotentialDistribution<T>,
    lo: i64,
    hi: i64,
    seed: u64,
    stream_id: u64,
) -> Result<Environment<T>> {
    if lo > hi {
        return Err(Error::IllPosedWindow(format!("window_lo {lo} > window_hi {hi}")));
    }
    let stream = KeyedStream::new(seed, stream_id);
    let values = (lo..=hi)
        .map(|x| match dist.constant_value() {
            Some(c) => c,
            None => dist.quantile(stream.uniform(zigzag(x))),
        })
        .collect();
    Ok(Environment {
        window_lo: lo,
        window_hi: hi,
        values,
        seed,
        stream_id,
    })
}

/// The shift `T_i`: the output at `x` is the input at `x - i`.
pub fn shift<T: Clone>(env: &Environment<T>, i: i64) -> Environment<T> {
    Environment {
        window_lo: env.window_lo + i,
        window_hi: env.window_hi + i,
        values: env.values.clone(),
        seed: env.seed,
        stream_id: env.stream_id,
    }
}
