//! Sample moments, normal-theory intervals and the affine extrapolation fit.

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Count, sum and sum of squares; merging is commutative for exact reproducibility
/// as long as the merge order is fixed by the caller.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn ci95(&self) -> f64 {
        Z95 * self.std_err()
    }
}

/// Standard error from batch means of a (weakly dependent) sequence.
pub fn batch_means_std_err(xs: &[f64], n_batches: usize) -> f64 {
    let n_batches = n_batches.max(2).min(xs.len().max(2));
    let size = xs.len() / n_batches;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = xs
        .chunks_exact(size)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    Moments::from_slice(&means).std_err()
}

/// Least-squares line `y = slope * x + intercept` with the slope's standard error
/// propagated from independent per-point standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_err: f64,
}

pub fn affine_fit(points: &[(f64, f64, f64)]) -> Option<AffineFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let var: f64 = points.iter().map(|p| ((p.0 - mx) / sxx).powi(2) * p.2 * p.2).sum();
    Some(AffineFit {
        slope,
        intercept: my - slope * mx,
        slope_std_err: var.sqrt(),
    })
}
