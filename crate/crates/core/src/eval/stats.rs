use statrs::function::beta::beta_reg;

use crate::error::{contract, Result};
use crate::nn::Tensor;

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    contract!(!labels.is_empty(), "accuracy of an empty set");
    contract!(
        predictions.len() == labels.len(),
        "{} predictions for {} labels",
        predictions.len(),
        labels.len()
    );
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-wise argmax of a `B×C` probability matrix; ties go to the lower class.
pub fn predicted_classes(probs: &Tensor) -> Vec<usize> {
    let c = probs.shape().get(1).copied().unwrap_or(1).max(1);
    probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
    /// Differences had zero variance with a non-zero mean.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    contract!(a.len() == b.len(), "paired samples differ in length: {} vs {}", a.len(), b.len());
    let n = a.len();
    contract!(n >= 2, "paired t-test needs at least 2 pairs, got {n}");
    contract!(
        a.iter().chain(b).all(|v| v.is_finite()),
        "paired t-test inputs must be finite"
    );
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / df as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df,
                degenerate: false,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
                degenerate: true,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let nu = df as f64;
    let p = beta_reg(nu / 2.0, 0.5, nu / (nu + t * t)).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        df,
        degenerate: false,
    })
}
