//! Evaluation of the fitted conditional CDF: Riemann integrals over outcome
//! intervals, high-order central partial differences in the treatment
//! coordinate, the direct-differentiation comparator, and the closed-form
//! indicator integral.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{OasdError, Result};
use crate::lasso_logit::DistRegFit;
use crate::linalg::lu_solve;
use crate::math::{logistic, logistic_deriv};

/// Outcome interval `u = (y1, y2)`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalU {
    pub y1: f64,
    pub y2: f64,
}

impl IntervalU {
    pub fn new(y1: f64, y2: f64) -> Result<Self> {
        if !(y1.is_finite() && y2.is_finite() && y1 < y2) {
            return Err(OasdError::Config(format!(
                "invalid interval ({y1}, {y2}): need finite y1 < y2"
            )));
        }
        Ok(Self { y1, y2 })
    }

    pub fn width(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Central difference-scheme coefficients η_1..η_ℓ determined by
/// Σ l·η_l = 1 and Σ l^v·η_l = 0 for v = 3, 5, ..., 2ℓ−1, so that the
/// scheme has bias of order h^{2ℓ}.
pub fn solve_eta(ell: usize) -> Result<Vec<f64>> {
    if !(1..=6).contains(&ell) {
        return Err(OasdError::Config(format!(
            "difference scheme order must be in 1..=6, got {ell}"
        )));
    }
    // rows: v = 1, 3, ..., 2ℓ−1; columns: l = 1..ℓ
    let mut a = vec![vec![0.0; ell]; ell];
    let mut rhs = vec![0.0; ell];
    rhs[0] = 1.0;
    for (r, row) in a.iter_mut().enumerate() {
        let v = (2 * r + 1) as i32;
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = ((c + 1) as f64).powi(v);
        }
    }
    lu_solve(a, rhs).ok_or_else(|| OasdError::Config("singular eta system".into()))
}

/// Bandwidth rule h_n = n^{−1/(4ℓ+2)}.
pub fn bandwidth(n: usize, ell: usize) -> f64 {
    (n as f64).powf(-1.0 / (4.0 * ell as f64 + 2.0))
}

/// A fully specified partial-difference scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffScheme {
    pub ell: usize,
    pub eta: Vec<f64>,
    pub bandwidth: f64,
}

impl DiffScheme {
    /// Coefficients for order `ell` with the default bandwidth rule at
    /// sample size `n`.
    pub fn new(ell: usize, n: usize) -> Result<Self> {
        Ok(Self {
            ell,
            eta: solve_eta(ell)?,
            bandwidth: bandwidth(n, ell),
        })
    }

    pub fn with_bandwidth(ell: usize, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(OasdError::Config(format!("bandwidth must be > 0, got {h}")));
        }
        Ok(Self {
            ell,
            eta: solve_eta(ell)?,
            bandwidth: h,
        })
    }

    /// Applies the scheme to a scalar function of the treatment:
    /// `(2h)⁻¹ Σ_l η_l (f(d + l·h) − f(d − l·h))`.
    pub fn apply<F: FnMut(f64) -> f64>(&self, d: f64, mut f: F) -> f64 {
        let h = self.bandwidth;
        let mut acc = 0.0;
        for (l, &eta) in self.eta.iter().enumerate() {
            let lh = (l + 1) as f64 * h;
            acc += eta * (f(d + lh) - f(d - lh));
        }
        acc / (2.0 * h)
    }
}

/// How the integral quadrature looks up `β̂(y)` between fitted grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridInterp {
    /// Step function: nearest fitted grid point at or below `y`.
    Step,
    /// Linear interpolation of the logistic linear index between the
    /// bracketing grid points.
    Linear,
}

impl Default for GridInterp {
    fn default() -> Self {
        GridInterp::Step
    }
}

fn check_covered(fit: &DistRegFit, u: &IntervalU) -> Result<()> {
    if !fit.covers(u.y1, u.y2) {
        return Err(OasdError::IntervalNotCovered {
            y1: u.y1,
            y2: u.y2,
            lo: *fit.y_grid.first().unwrap_or(&f64::NAN),
            hi: *fit.y_grid.last().unwrap_or(&f64::NAN),
        });
    }
    Ok(())
}

/// Linear index of the fitted CDF at grid index `idx`, point `(d, x)`.
pub fn linear_index_at(fit: &DistRegFit, idx: usize, d: f64, x: &ArrayView1<f64>) -> Result<f64> {
    let pt = fit.checked_point(idx)?;
    Ok(fit.context.linear_index(pt.intercept, &pt.beta, d, x))
}

/// ∂/∂d of the linear index at grid index `idx`.
pub fn linear_index_deriv_at(
    fit: &DistRegFit,
    idx: usize,
    d: f64,
    x: &ArrayView1<f64>,
) -> Result<f64> {
    let pt = fit.checked_point(idx)?;
    Ok(fit.context.linear_index_deriv(&pt.beta, d, x))
}

/// Fitted CDF value F̂_Y(y | d, x) = Λ(b'(d,x) β̂(y)) at a grid value `y`.
pub fn cdf_hat(fit: &DistRegFit, y: f64, d: f64, x: &ArrayView1<f64>) -> Result<f64> {
    let pt = fit.usable_point_at(y)?;
    Ok(logistic(fit.context.linear_index(pt.intercept, &pt.beta, d, x)))
}

/// Riemann points of the quadrature mapped to grid indices with their
/// multiplicities, in grid order.
fn quadrature_weights(fit: &DistRegFit, u: &IntervalU, steps: usize) -> Result<Vec<(usize, usize)>> {
    let dy = u.width() / steps as f64;
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for j in 1..=steps {
        let yj = u.y1 + j as f64 * dy;
        let idx = fit
            .grid_index_at_or_below(yj.min(u.y2))
            .ok_or(OasdError::IntervalNotCovered {
                y1: u.y1,
                y2: u.y2,
                lo: *fit.y_grid.first().unwrap_or(&f64::NAN),
                hi: *fit.y_grid.last().unwrap_or(&f64::NAN),
            })?;
        match counts.last_mut() {
            Some((i, c)) if *i == idx => *c += 1,
            _ => counts.push((idx, 1)),
        }
    }
    Ok(counts)
}

/// Riemann points with linear-interpolation weights: for each quadrature
/// point, the bracketing grid indices and the interpolation fraction.
fn quadrature_nodes_linear(
    fit: &DistRegFit,
    u: &IntervalU,
    steps: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    let dy = u.width() / steps as f64;
    let mut nodes = Vec::with_capacity(steps);
    for j in 1..=steps {
        let yj = (u.y1 + j as f64 * dy).min(u.y2);
        let lo = fit
            .grid_index_at_or_below(yj)
            .ok_or(OasdError::IntervalNotCovered {
                y1: u.y1,
                y2: u.y2,
                lo: *fit.y_grid.first().unwrap_or(&f64::NAN),
                hi: *fit.y_grid.last().unwrap_or(&f64::NAN),
            })?;
        if lo + 1 < fit.y_grid.len() && yj > fit.y_grid[lo] {
            let g0 = fit.y_grid[lo];
            let g1 = fit.y_grid[lo + 1];
            nodes.push((lo, lo + 1, (yj - g0) / (g1 - g0)));
        } else {
            nodes.push((lo, lo, 0.0));
        }
    }
    Ok(nodes)
}

/// Integral of the fitted CDF over `u` at `(d, x)`:
/// `Σ_{j=1..J} F̂(y1 + jΔy | d, x) Δy` with `Δy = (y2−y1)/J`.
pub fn integral_cdf(
    fit: &DistRegFit,
    u: &IntervalU,
    d: f64,
    x: &ArrayView1<f64>,
    steps: usize,
    interp: GridInterp,
) -> Result<f64> {
    if steps == 0 {
        return Err(OasdError::Config("quadrature needs J >= 1".into()));
    }
    check_covered(fit, u)?;
    let dy = u.width() / steps as f64;
    match interp {
        GridInterp::Step => {
            let weights = quadrature_weights(fit, u, steps)?;
            let mut acc = 0.0;
            for (idx, count) in weights {
                let z = linear_index_at(fit, idx, d, x)?;
                acc += count as f64 * logistic(z);
            }
            Ok(acc * dy)
        }
        GridInterp::Linear => {
            let nodes = quadrature_nodes_linear(fit, u, steps)?;
            // cache z per grid index on demand
            let mut z_cache: Vec<Option<f64>> = vec![None; fit.y_grid.len()];
            let mut z_at = |idx: usize| -> Result<f64> {
                if let Some(z) = z_cache[idx] {
                    return Ok(z);
                }
                let z = linear_index_at(fit, idx, d, x)?;
                z_cache[idx] = Some(z);
                Ok(z)
            };
            let mut acc = 0.0;
            for (lo, hi, frac) in nodes {
                let z = if lo == hi {
                    z_at(lo)?
                } else {
                    let zl = z_at(lo)?;
                    let zh = z_at(hi)?;
                    zl + frac * (zh - zl)
                };
                acc += logistic(z);
            }
            Ok(acc * dy)
        }
    }
}

/// Partial-difference estimate of ∂_d of the CDF integral:
/// `(2h)⁻¹ Σ_l η_l (IF̂(u, d+lh, x) − IF̂(u, d−lh, x))`.
pub fn diff_integral_cdf(
    fit: &DistRegFit,
    scheme: &DiffScheme,
    u: &IntervalU,
    d: f64,
    x: &ArrayView1<f64>,
    steps: usize,
    interp: GridInterp,
) -> Result<f64> {
    check_covered(fit, u)?;
    let mut err = None;
    let v = scheme.apply(d, |dd| {
        match integral_cdf(fit, u, dd, x, steps, interp) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Direct-differentiation comparator: `Σ_j Λ'(z_j) (∂_d b)'β̂(y_j) Δy` using
/// the analytic dictionary derivatives instead of partial differences.
pub fn direct_diff_cdf(
    fit: &DistRegFit,
    u: &IntervalU,
    d: f64,
    x: &ArrayView1<f64>,
    steps: usize,
    interp: GridInterp,
) -> Result<f64> {
    if steps == 0 {
        return Err(OasdError::Config("quadrature needs J >= 1".into()));
    }
    check_covered(fit, u)?;
    let dy = u.width() / steps as f64;
    match interp {
        GridInterp::Step => {
            let weights = quadrature_weights(fit, u, steps)?;
            let mut acc = 0.0;
            for (idx, count) in weights {
                let z = linear_index_at(fit, idx, d, x)?;
                let zd = linear_index_deriv_at(fit, idx, d, x)?;
                acc += count as f64 * logistic_deriv(z) * zd;
            }
            Ok(acc * dy)
        }
        GridInterp::Linear => {
            let nodes = quadrature_nodes_linear(fit, u, steps)?;
            let mut cache: Vec<Option<(f64, f64)>> = vec![None; fit.y_grid.len()];
            let mut at = |idx: usize| -> Result<(f64, f64)> {
                if let Some(v) = cache[idx] {
                    return Ok(v);
                }
                let v = (
                    linear_index_at(fit, idx, d, x)?,
                    linear_index_deriv_at(fit, idx, d, x)?,
                );
                cache[idx] = Some(v);
                Ok(v)
            };
            let mut acc = 0.0;
            for (lo, hi, frac) in nodes {
                let (z, zd) = if lo == hi {
                    at(lo)?
                } else {
                    let (zl, zdl) = at(lo)?;
                    let (zh, zdh) = at(hi)?;
                    (zl + frac * (zh - zl), zdl + frac * (zdh - zdl))
                };
                acc += logistic_deriv(z) * zd;
            }
            Ok(acc * dy)
        }
    }
}

/// Pointwise partial-difference estimate of ∂_d F̂(y | d, x) at a single
/// grid value `y`.
pub fn cdf_deriv_partial_difference(
    fit: &DistRegFit,
    scheme: &DiffScheme,
    y: f64,
    d: f64,
    x: &ArrayView1<f64>,
) -> Result<f64> {
    let pt = fit.usable_point_at(y)?;
    Ok(scheme.apply(d, |dd| {
        logistic(fit.context.linear_index(pt.intercept, &pt.beta, dd, x))
    }))
}

/// Pointwise direct-differentiation estimate Λ'(z)·(∂_d b)'β̂(y).
pub fn cdf_deriv_direct(fit: &DistRegFit, y: f64, d: f64, x: &ArrayView1<f64>) -> Result<f64> {
    let pt = fit.usable_point_at(y)?;
    let z = fit.context.linear_index(pt.intercept, &pt.beta, d, x);
    let zd = fit.context.linear_index_deriv(&pt.beta, d, x);
    Ok(logistic_deriv(z) * zd)
}

/// Closed form of ∫_{y1}^{y2} 1{Y < y} dy:
/// `1{Y <= y1}(y2−y1) + 1{y1 < Y < y2}(y2−Y)`.
pub fn indicator_integral(y_i: f64, u: &IntervalU) -> f64 {
    if y_i <= u.y1 {
        u.width()
    } else if y_i < u.y2 {
        u.y2 - y_i
    } else {
        0.0
    }
}
