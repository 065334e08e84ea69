//! Central finite differences, the oracle every analytic gradient is certified against.

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `theta`, one entry at a time.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    let indices: Vec<usize> = (0..theta.len()).collect();
    finite_diff_entries(f, theta, &indices, h)
}

/// Central differences restricted to the listed entries of `theta`.
pub fn finite_diff_entries(
    f: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective is not finite around entry {i}"
                )));
            }
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// max_i |a_i − n_i| / max(1, |n_i|)
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_is_exact() {
        let g = finite_diff_grad(|t| 2.0 * t[0] - 0.5 * t[1] + 4.0, &[1.0, -7.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!((g[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_finite_objective_is_error() {
        assert!(finite_diff_grad(|t| (t[0]).ln(), &[0.0], 1e-5).is_err());
        assert!(finite_diff_grad(|t| t[0], &[0.0], 0.0).is_err());
    }
}
