//! Thomas elimination for tridiagonal systems.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Solves `A x = rhs` where `A` has sub-diagonal `lower` (row i couples to i-1),
/// main diagonal `diag` and super-diagonal `upper` (row i couples to i+1).
///
/// `lower[0]` and `upper[n-1]` are ignored. No pivoting: intended for the
/// diagonally dominant systems produced by killed walks. A vanishing pivot is
/// reported as [`Error::SingularSystem`].
pub fn solve_tridiagonal<T: Scalar>(lower: &[T], diag: &[T], upper: &[T], rhs: &[T]) -> Result<Vec<T>> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::IllPosedWindow(format!(
            "tridiagonal band lengths differ: {} {} {} {}",
            lower.len(),
            n,
            upper.len(),
            rhs.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    let mut pivot = diag[0];
    if pivot == T::zero() || !pivot.is_finite() {
        return Err(Error::SingularSystem { row: 0 });
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot == T::zero() || !pivot.is_finite() {
            return Err(Error::SingularSystem { row: i });
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { T::zero() };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] = d[i] - c[i] * d[i + 1];
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matvec(lower: &[f64], diag: &[f64], upper: &[f64], x: &[f64]) -> Vec<f64> {
        let n = diag.len();
        (0..n)
            .map(|i| {
                let mut s = diag[i] * x[i];
                if i > 0 {
                    s += lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += upper[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    #[test]
    fn solves_dominant_system() {
        let lower = [0.0, -0.3, -0.2, -0.4, -0.1];
        let diag = [1.0, 1.0, 1.0, 1.0, 1.0];
        let upper = [-0.5, -0.2, -0.6, -0.3, 0.0];
        let rhs = [1.0, 0.0, 2.0, -1.0, 0.5];
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
        let back = matvec(&lower, &diag, &upper, &x);
        for (a, b) in back.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_reported() {
        let err = solve_tridiagonal(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]).unwrap_err();
        assert_eq!(err, Error::SingularSystem { row: 1 });
    }

    #[test]
    fn single_equation_f32() {
        let x = solve_tridiagonal(&[0.0f32], &[4.0], &[0.0], &[2.0]).unwrap();
        assert_eq!(x, vec![0.5f32]);
    }
}
