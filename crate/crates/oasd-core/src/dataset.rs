//! Observation container: outcome, continuous treatment, covariate matrix.

use ndarray::{Array1, Array2};

use crate::error::{OasdError, Result};

/// `n` observations of (Y, D, X) with X an `n × K` covariate matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Array1<f64>,
    pub d: Array1<f64>,
    pub x: Array2<f64>,
}

impl Dataset {
    /// Validates shapes and finiteness; errors carry the offending row.
    pub fn new(y: Array1<f64>, d: Array1<f64>, x: Array2<f64>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(OasdError::Config(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if d.len() != n || x.nrows() != n {
            return Err(OasdError::Config(format!(
                "shape mismatch: y has {n} rows, d has {}, x has {}",
                d.len(),
                x.nrows()
            )));
        }
        for i in 0..n {
            if !y[i].is_finite() {
                return Err(OasdError::NonFinite {
                    row: i,
                    column: "outcome".into(),
                });
            }
            if !d[i].is_finite() {
                return Err(OasdError::NonFinite {
                    row: i,
                    column: "treatment".into(),
                });
            }
            for j in 0..x.ncols() {
                if !x[[i, j]].is_finite() {
                    return Err(OasdError::NonFinite {
                        row: i,
                        column: format!("x{}", j + 1),
                    });
                }
            }
        }
        Ok(Self { y, d, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Outcome values sorted ascending; basis for empirical quantiles.
    pub fn sorted_y(&self) -> Vec<f64> {
        let mut ys: Vec<f64> = self.y.to_vec();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ys
    }
}

/// Linear-interpolation empirical quantile (the common "type 7" rule) on a
/// sorted slice.
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&tau), "quantile level out of range");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = tau * (n - 1) as f64;
    let lo = pos.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}
