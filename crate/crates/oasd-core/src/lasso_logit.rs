//! ℓ1-penalized logistic distribution regression of `1{Y <= y}` on the
//! dictionary, with the theoretical penalty level, iterated heteroskedastic
//! penalty loadings, and an unpenalized post-selection refit per grid point.
//!
//! The Lasso objective per grid point is
//!
//! ```text
//! (1/n) Σ_i [ -1{Y_i <= y} ln Λ(z_i) - 1{Y_i > y} ln(1 - Λ(z_i)) ]
//!     + (λ/n) Σ_k ψ_k |β_k|,          z_i = β0 + b'(D_i, X_i) β
//! ```
//!
//! minimized by cyclic coordinate descent with a curvature majorizer
//! (logistic curvature is at most 1/4), so every accepted step decreases the
//! objective. The intercept is never penalized.

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;

use crate::basis::{BasisContext, BasisExpansion};
use crate::dataset::Dataset;
use crate::error::{OasdError, Result};
use crate::math::{log1pexp, logistic, normal_quantile};

/// Relative floor applied to penalty loadings: ψ_k is lifted to
/// `LOADING_FLOOR_REL · max_j ψ_j` so perfectly fit columns keep a positive
/// penalty weight.
pub const LOADING_FLOOR_REL: f64 = 1e-6;

/// Penalty level λ = 1.1 √n Φ⁻¹(1 − (0.1/ln n) / (2 p n)).
pub fn penalty_level(n: usize, p: usize) -> Result<f64> {
    if n < 8 {
        return Err(OasdError::Config(format!(
            "penalty level requires n >= 8, got {n}"
        )));
    }
    if p < 1 {
        return Err(OasdError::Config("penalty level requires p >= 1".into()));
    }
    let nf = n as f64;
    let arg = 1.0 - (0.1 / nf.ln()) / (2.0 * p as f64 * nf);
    if !(0.0 < arg && arg < 1.0) {
        return Err(OasdError::Config(format!(
            "normal quantile argument {arg} outside (0,1)"
        )));
    }
    Ok(1.1 * nf.sqrt() * normal_quantile(arg))
}

/// Initial loadings ψ̂⁰_k = ½ √(n⁻¹ Σ_i b_k²).
pub fn initial_loadings(b: &BasisExpansion) -> Array1<f64> {
    b.col_sq_mean.mapv(|m| 0.5 * m.sqrt())
}

/// Refined loadings ψ̂_k = √(n⁻¹ Σ_i b_k² r_i²) from fit residuals
/// r_i = 1{Y_i <= y} − Λ(ẑ_i). The residual factor enters squared; the
/// root would otherwise act on a signed quantity.
pub fn update_loadings(b: &BasisExpansion, residuals: &Array1<f64>) -> Array1<f64> {
    let n = b.n() as f64;
    let p = b.p();
    let mut out = Array1::zeros(p);
    for k in 0..p {
        let col = b.columns.column(k);
        let mut s = 0.0;
        for i in 0..b.n() {
            let br = col[i] * residuals[i];
            s += br * br;
        }
        out[k] = (s / n).sqrt();
    }
    out
}

/// Lifts loadings to the relative floor; no-op for an all-zero vector.
pub fn floor_loadings(loadings: &mut Array1<f64>) {
    let max = loadings.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return;
    }
    let floor = LOADING_FLOOR_REL * max;
    loadings.mapv_inplace(|v| v.max(floor));
}

/// Coordinate-descent controls. Defaults: objective-decrease tolerance 1e-7,
/// at most 10_000 passes.
#[derive(Debug, Clone, Copy)]
pub struct LogitSolverConfig {
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for LogitSolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_passes: 10_000,
        }
    }
}

/// Solution of one penalized logistic fit.
#[derive(Debug, Clone)]
pub struct PenalizedLogitFit {
    pub intercept: f64,
    pub beta: Array1<f64>,
    pub objective: f64,
    pub passes: usize,
    pub converged: bool,
}

impl PenalizedLogitFit {
    /// Nonzero penalized coefficients as (index, value) pairs.
    pub fn sparse_beta(&self) -> Vec<(usize, f64)> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, v)| (k, *v))
            .collect()
    }

    pub fn support(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, _)| k)
            .collect()
    }
}

fn logit_clipped(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

struct SolverState<'a> {
    y: &'a Array1<f64>,
    b: &'a BasisExpansion,
    z: Array1<f64>,
    mu: Array1<f64>,
    intercept: f64,
    beta: Array1<f64>,
    pen: Array1<f64>, // (λ/n) ψ_k per coordinate
}

impl<'a> SolverState<'a> {
    fn nll(&self) -> f64 {
        let n = self.y.len() as f64;
        let mut s = 0.0;
        for i in 0..self.y.len() {
            s += log1pexp(self.z[i]) - self.y[i] * self.z[i];
        }
        s / n
    }

    fn objective(&self) -> f64 {
        let pen: f64 = self
            .beta
            .iter()
            .zip(self.pen.iter())
            .map(|(b, w)| w * b.abs())
            .sum();
        self.nll() + pen
    }

    fn refresh_mu(&mut self) {
        for i in 0..self.z.len() {
            self.mu[i] = logistic(self.z[i]);
        }
    }

    /// One majorized coordinate step; returns true when the coefficient moved.
    fn update_coord(&mut self, k: usize, curvature: f64) -> bool {
        let n = self.y.len() as f64;
        let col = self.b.columns.column(k);
        let mut g = 0.0;
        for i in 0..self.y.len() {
            g += col[i] * (self.mu[i] - self.y[i]);
        }
        g /= n;
        let u = curvature * self.beta[k] - g;
        let w = self.pen[k];
        let new = if u.abs() <= w {
            0.0
        } else {
            (u - w.copysign(u)) / curvature
        };
        let delta = new - self.beta[k];
        if delta == 0.0 {
            return false;
        }
        self.beta[k] = new;
        for i in 0..self.y.len() {
            self.z[i] += delta * col[i];
        }
        self.refresh_mu();
        true
    }

    fn update_intercept(&mut self) -> bool {
        let n = self.y.len() as f64;
        let g: f64 = self
            .mu
            .iter()
            .zip(self.y.iter())
            .map(|(m, y)| m - y)
            .sum::<f64>()
            / n;
        // curvature of the mean log-likelihood in the intercept is at most 1/4
        let delta = -4.0 * g;
        if delta == 0.0 {
            return false;
        }
        self.intercept += delta;
        self.z.mapv_inplace(|z| z + delta);
        self.refresh_mu();
        true
    }
}

/// Fits the weighted-ℓ1 penalized logistic regression. `indicator` must be a
/// non-constant 0/1 vector; `loadings` must already be floored.
pub fn fit_penalized_logit(
    indicator: &Array1<f64>,
    b: &BasisExpansion,
    lambda: f64,
    loadings: &Array1<f64>,
    warm: Option<&PenalizedLogitFit>,
) -> Result<PenalizedLogitFit> {
    let n = b.n();
    let p = b.p();
    if indicator.len() != n {
        return Err(OasdError::Config(format!(
            "indicator length {} does not match n = {n}",
            indicator.len()
        )));
    }
    if loadings.len() != p {
        return Err(OasdError::Config("loadings length mismatch".into()));
    }
    let ones = indicator.iter().filter(|v| **v > 0.5).count();
    if ones == 0 || ones == n {
        return Err(OasdError::DegenerateFit(
            "indicator is constant; logistic fit undefined".into(),
        ));
    }
    fit_penalized_logit_unchecked(indicator, b, lambda, loadings, warm, LogitSolverConfig::default())
}

pub(crate) fn fit_penalized_logit_unchecked(
    indicator: &Array1<f64>,
    b: &BasisExpansion,
    lambda: f64,
    loadings: &Array1<f64>,
    warm: Option<&PenalizedLogitFit>,
    cfg: LogitSolverConfig,
) -> Result<PenalizedLogitFit> {
    let n = b.n();
    let p = b.p();
    let nf = n as f64;
    let mean_y = indicator.sum() / nf;

    let (intercept, beta) = match warm {
        Some(f) => (f.intercept, f.beta.clone()),
        None => (logit_clipped(mean_y), Array1::zeros(p)),
    };
    let mut z = Array1::from_elem(n, intercept);
    for (k, &bk) in beta.iter().enumerate() {
        if bk != 0.0 {
            let col = b.columns.column(k);
            for i in 0..n {
                z[i] += bk * col[i];
            }
        }
    }
    let mut state = SolverState {
        y: indicator,
        b,
        mu: z.mapv(logistic),
        z,
        intercept,
        beta,
        pen: loadings.mapv(|w| lambda / nf * w),
    };

    // per-coordinate curvature majorizer: 1/4 · n⁻¹ Σ b_k²
    let curvature: Vec<f64> = b.col_sq_mean.iter().map(|m| (0.25 * m).max(1e-12)).collect();

    let mut obj = state.objective();
    let mut passes = 0usize;
    let mut converged = false;

    while passes < cfg.max_passes {
        // full sweep
        state.update_intercept();
        for k in 0..p {
            state.update_coord(k, curvature[k]);
        }
        passes += 1;
        let new_obj = state.objective();
        let full_drop = obj - new_obj;
        obj = new_obj;

        // cycle the active set while it keeps paying
        let active: Vec<usize> = state
            .beta
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, _)| k)
            .collect();
        while passes < cfg.max_passes {
            state.update_intercept();
            for &k in &active {
                state.update_coord(k, curvature[k]);
            }
            passes += 1;
            let inner_obj = state.objective();
            let drop = obj - inner_obj;
            obj = inner_obj;
            if drop < cfg.tol * 0.1 {
                break;
            }
        }

        if full_drop < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(PenalizedLogitFit {
        intercept: state.intercept,
        beta: state.beta,
        objective: obj,
        passes,
        converged,
    })
}

/// Largest KKT violation of the penalized objective at a candidate solution:
/// for zero coefficients the smooth gradient must stay inside the penalty
/// weight, for active ones it must match it.
pub fn kkt_violation(
    indicator: &Array1<f64>,
    b: &BasisExpansion,
    lambda: f64,
    loadings: &Array1<f64>,
    fit: &PenalizedLogitFit,
) -> f64 {
    let n = b.n();
    let nf = n as f64;
    let mut z = Array1::from_elem(n, fit.intercept);
    for (k, &bk) in fit.beta.iter().enumerate() {
        if bk != 0.0 {
            let col = b.columns.column(k);
            for i in 0..n {
                z[i] += bk * col[i];
            }
        }
    }
    let mu = z.mapv(logistic);
    let mut worst: f64 = 0.0;
    // intercept is unpenalized: gradient should vanish
    let g0: f64 = mu
        .iter()
        .zip(indicator.iter())
        .map(|(m, y)| m - y)
        .sum::<f64>()
        / nf;
    worst = worst.max(g0.abs());
    for k in 0..b.p() {
        let col = b.columns.column(k);
        let mut g = 0.0;
        for i in 0..n {
            g += col[i] * (mu[i] - indicator[i]);
        }
        g /= nf;
        let w = lambda / nf * loadings[k];
        let v = if fit.beta[k] == 0.0 {
            (g.abs() - w).max(0.0)
        } else {
            (g + w.copysign(fit.beta[k])).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Post-selection refit: unpenalized logistic MLE with all coefficients off
/// the support fixed at zero.
#[derive(Debug, Clone)]
pub struct PostLassoFit {
    pub intercept: f64,
    /// Coefficients aligned with `support`.
    pub beta: Vec<f64>,
    pub support: Vec<usize>,
    pub converged: bool,
}

/// Damped-Newton refit on the selected support. Returns `Err` on separation
/// or a singular Hessian; callers fall back to the Lasso coefficients.
pub fn post_lasso_refit(
    indicator: &Array1<f64>,
    b: &BasisExpansion,
    support: &[usize],
) -> Result<PostLassoFit> {
    let n = b.n();
    let nf = n as f64;
    let s = support.len();
    if s >= n {
        return Err(OasdError::DegenerateFit(format!(
            "support size {s} is not below n = {n}"
        )));
    }
    let mean_y = indicator.sum() / nf;
    if mean_y <= 0.0 || mean_y >= 1.0 {
        return Err(OasdError::DegenerateFit(
            "indicator is constant; logistic fit undefined".into(),
        ));
    }
    let dim = s + 1;
    let mut theta = vec![0.0; dim];
    theta[0] = logit_clipped(mean_y);

    let mut z = Array1::from_elem(n, theta[0]);
    let nll = |z: &Array1<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            acc += log1pexp(z[i]) - indicator[i] * z[i];
        }
        acc / nf
    };
    let recompute_z = |theta: &[f64]| -> Array1<f64> {
        let mut z = Array1::from_elem(n, theta[0]);
        for (j, &k) in support.iter().enumerate() {
            let col = b.columns.column(k);
            let c = theta[j + 1];
            if c != 0.0 {
                for i in 0..n {
                    z[i] += c * col[i];
                }
            }
        }
        z
    };

    let mut obj = nll(&z);
    let mut converged = false;
    for _ in 0..100 {
        let mu = z.mapv(logistic);
        // gradient
        let mut grad = vec![0.0; dim];
        for i in 0..n {
            grad[0] += mu[i] - indicator[i];
        }
        for (j, &k) in support.iter().enumerate() {
            let col = b.columns.column(k);
            let mut g = 0.0;
            for i in 0..n {
                g += col[i] * (mu[i] - indicator[i]);
            }
            grad[j + 1] = g;
        }
        for g in grad.iter_mut() {
            *g /= nf;
        }
        let gmax = grad.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
        if gmax < 1e-10 {
            converged = true;
            break;
        }
        // Hessian over (intercept, support)
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        let mut hess = vec![vec![0.0; dim]; dim];
        hess[0][0] = w.iter().sum::<f64>() / nf;
        for (j, &k) in support.iter().enumerate() {
            let col = b.columns.column(k);
            let mut h0 = 0.0;
            for i in 0..n {
                h0 += w[i] * col[i];
            }
            hess[0][j + 1] = h0 / nf;
            hess[j + 1][0] = h0 / nf;
            for (l, &m_idx) in support.iter().enumerate().skip(j) {
                let colm = b.columns.column(m_idx);
                let mut h = 0.0;
                for i in 0..n {
                    h += w[i] * col[i] * colm[i];
                }
                hess[j + 1][l + 1] = h / nf;
                hess[l + 1][j + 1] = h / nf;
            }
        }
        let step = crate::linalg::cholesky_solve(&hess, &grad)
            .or_else(|| crate::linalg::lu_solve(hess.clone(), grad.clone()))
            .ok_or_else(|| {
                OasdError::DegenerateFit("singular Hessian in post-selection refit".into())
            })?;

        // damped step: halve until the objective does not increase
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| t - scale * s)
                .collect();
            let zc = recompute_z(&cand);
            let oc = nll(&zc);
            if oc <= obj + 1e-14 {
                theta = cand;
                z = zc;
                obj = oc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if theta.iter().any(|t| t.abs() > 1e4) {
            return Err(OasdError::DegenerateFit(
                "post-selection refit diverged (separation)".into(),
            ));
        }
    }
    if !converged {
        return Err(OasdError::DegenerateFit(
            "post-selection refit did not converge".into(),
        ));
    }
    Ok(PostLassoFit {
        intercept: theta[0],
        beta: theta[1..].to_vec(),
        support: support.to_vec(),
        converged,
    })
}

/// Per-grid-point state of the distribution regression.
#[derive(Debug, Clone)]
pub struct GridPointFit {
    pub y: f64,
    pub usable: bool,
    pub reason: Option<String>,
    /// Post-selection coefficients used for CDF evaluation.
    pub intercept: f64,
    pub beta: Vec<(usize, f64)>,
    /// Raw Lasso solution kept alongside.
    pub lasso_intercept: f64,
    pub lasso_beta: Vec<(usize, f64)>,
    pub support: Vec<usize>,
    pub loadings: Array1<f64>,
    pub iterations_used: usize,
    pub loading_delta: f64,
    pub post_lasso_fell_back: bool,
}

impl GridPointFit {
    fn unusable(y: f64, reason: String, p: usize) -> Self {
        Self {
            y,
            usable: false,
            reason: Some(reason),
            intercept: 0.0,
            beta: Vec::new(),
            lasso_intercept: 0.0,
            lasso_beta: Vec::new(),
            support: Vec::new(),
            loadings: Array1::zeros(p),
            iterations_used: 0,
            loading_delta: 0.0,
            post_lasso_fell_back: false,
        }
    }

    /// Logistic CDF value at a point, from the post-selection coefficients.
    pub fn cdf_at(&self, ctx: &BasisContext, d: f64, x: &ArrayView1<f64>) -> f64 {
        logistic(ctx.linear_index(self.intercept, &self.beta, d, x))
    }
}

/// Distribution-regression fit over a sorted outcome grid.
#[derive(Debug, Clone)]
pub struct DistRegFit {
    pub context: BasisContext,
    pub y_grid: Vec<f64>,
    pub points: Vec<GridPointFit>,
    pub lambda: f64,
}

impl DistRegFit {
    /// Index of the largest grid point at or below `y`.
    pub fn grid_index_at_or_below(&self, y: f64) -> Option<usize> {
        match self
            .y_grid
            .binary_search_by(|g| g.partial_cmp(&y).unwrap())
        {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }

    /// Grid point for an exact grid value, checked usable.
    pub fn usable_point_at(&self, y: f64) -> Result<&GridPointFit> {
        let idx = self
            .y_grid
            .iter()
            .position(|g| (g - y).abs() <= 1e-12 * (1.0 + y.abs()))
            .ok_or(OasdError::IntervalNotCovered {
                y1: y,
                y2: y,
                lo: *self.y_grid.first().unwrap_or(&f64::NAN),
                hi: *self.y_grid.last().unwrap_or(&f64::NAN),
            })?;
        self.checked_point(idx)
    }

    pub fn checked_point(&self, idx: usize) -> Result<&GridPointFit> {
        let pt = &self.points[idx];
        if !pt.usable {
            return Err(OasdError::UnusableGridPoint {
                y: pt.y,
                reason: pt.reason.clone().unwrap_or_else(|| "unknown".into()),
            });
        }
        Ok(pt)
    }

    pub fn covers(&self, y1: f64, y2: f64) -> bool {
        if self.y_grid.is_empty() {
            return false;
        }
        let lo = self.y_grid[0];
        let hi = *self.y_grid.last().unwrap();
        // ulp-level slack so interval endpoints that are meant to sit on
        // grid points are not rejected over the last bit
        let tol = 1e-9 * (1.0 + (hi - lo).abs());
        lo - tol <= y1 && y2 <= hi + tol
    }
}

/// Controls for the distribution regression.
#[derive(Debug, Clone, Copy)]
pub struct DistRegConfig {
    /// Upper bound on penalty-loading iterations.
    pub q_star: usize,
    /// Minimum observations required on each side of the indicator.
    pub min_tail_count: usize,
    pub solver: LogitSolverConfig,
}

impl Default for DistRegConfig {
    fn default() -> Self {
        Self {
            q_star: 15,
            min_tail_count: 10,
            solver: LogitSolverConfig::default(),
        }
    }
}

fn fit_grid_point(
    data: &Dataset,
    b: &BasisExpansion,
    y: f64,
    lambda: f64,
    cfg: &DistRegConfig,
) -> GridPointFit {
    let n = data.n();
    let p = b.p();
    let indicator = Array1::from_iter(data.y.iter().map(|&v| if v <= y { 1.0 } else { 0.0 }));
    let ones = indicator.iter().filter(|v| **v > 0.5).count();
    if ones < cfg.min_tail_count || n - ones < cfg.min_tail_count {
        return GridPointFit::unusable(
            y,
            format!(
                "tail too thin: {ones} of {n} observations at or below the grid point (need {} per side)",
                cfg.min_tail_count
            ),
            p,
        );
    }

    let mut loadings = initial_loadings(b);
    floor_loadings(&mut loadings);

    let mut lasso: Option<PenalizedLogitFit> = None;
    let mut post: Option<PostLassoFit> = None;
    let mut fell_back = false;
    let mut delta = f64::NAN;
    let mut iterations = 0usize;

    for q in 0..=cfg.q_star {
        let fit = match fit_penalized_logit_unchecked(
            &indicator,
            b,
            lambda,
            &loadings,
            lasso.as_ref(),
            cfg.solver,
        ) {
            Ok(f) => f,
            Err(e) => {
                return GridPointFit::unusable(y, format!("lasso failed: {e}"), p);
            }
        };
        let support = fit.support();
        let (refit, fb) = match post_lasso_refit(&indicator, b, &support) {
            Ok(r) => (r, false),
            Err(_) => (
                PostLassoFit {
                    intercept: fit.intercept,
                    beta: support.iter().map(|&k| fit.beta[k]).collect(),
                    support: support.clone(),
                    converged: false,
                },
                true,
            ),
        };
        fell_back = fb;
        iterations = q;

        // residuals from the refit coefficients
        let mut z = Array1::from_elem(n, refit.intercept);
        for (j, &k) in refit.support.iter().enumerate() {
            let col = b.columns.column(k);
            let c = refit.beta[j];
            for i in 0..n {
                z[i] += c * col[i];
            }
        }
        let residuals = Array1::from_iter(
            indicator
                .iter()
                .zip(z.iter())
                .map(|(y, z)| y - logistic(*z)),
        );
        let mut new_loadings = update_loadings(b, &residuals);
        floor_loadings(&mut new_loadings);
        delta = loadings
            .iter()
            .zip(new_loadings.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);

        lasso = Some(fit);
        post = Some(refit);

        if q == cfg.q_star || delta < 1e-8 {
            break;
        }
        loadings = new_loadings;
    }

    let lasso = lasso.expect("at least one iteration ran");
    let post = post.expect("at least one iteration ran");
    GridPointFit {
        y,
        usable: true,
        reason: None,
        intercept: post.intercept,
        beta: post
            .support
            .iter()
            .cloned()
            .zip(post.beta.iter().cloned())
            .collect(),
        lasso_intercept: lasso.intercept,
        lasso_beta: lasso.sparse_beta(),
        support: post.support,
        loadings,
        iterations_used: iterations,
        loading_delta: delta,
        post_lasso_fell_back: fell_back,
    }
}

/// Fits the distribution regression at every grid point. Grid points with a
/// degenerate indicator are flagged unusable instead of aborting the grid.
pub fn fit_distribution_regression(
    data: &Dataset,
    b: &BasisExpansion,
    y_grid: &[f64],
    cfg: &DistRegConfig,
) -> Result<DistRegFit> {
    if y_grid.is_empty() {
        return Err(OasdError::Config("empty outcome grid".into()));
    }
    if y_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OasdError::Config(
            "outcome grid must be strictly increasing".into(),
        ));
    }
    b.context.check_compatible(data)?;
    let lambda = penalty_level(data.n(), b.p())?;
    let points: Vec<GridPointFit> = y_grid
        .par_iter()
        .map(|&y| fit_grid_point(data, b, y, lambda, cfg))
        .collect();
    Ok(DistRegFit {
        context: b.context.clone(),
        y_grid: y_grid.to_vec(),
        points,
        lambda,
    })
}
