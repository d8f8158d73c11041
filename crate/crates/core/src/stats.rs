//! Small statistics helpers used by the harness and the test suites.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of `observed` counts against `expected` probabilities
/// (normalized internally).
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<ChiSquareResult> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::InvalidArgument(
            "chi-square needs matching vectors of length >= 2".into(),
        ));
    }
    let total: u64 = observed.iter().sum();
    let mass: f64 = expected.iter().sum();
    if total == 0 || !(mass > 0.0) || expected.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument(
            "chi-square needs positive expectations and counts".into(),
        ));
    }
    let statistic = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let e = e / mass * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum::<f64>();
    let dof = observed.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_diff: f64,
    pub t: f64,
    pub dof: usize,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Paired two-sided Student t-test of `a - b`. Identical samples give `t = 0`, `p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs two samples of equal length >= 2".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = d.len() - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTestResult {
            mean_diff: mean,
            t,
            dof,
            p_value: p,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(TTestResult {
        mean_diff: mean,
        t,
        dof,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}
