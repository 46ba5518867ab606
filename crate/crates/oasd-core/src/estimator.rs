//! Orthogonal-score estimation of the outcome-conditioned average
//! structural derivative per interval, plus the naive plug-in that drops the
//! correction terms.
//!
//! The per-observation score at interval `u = (y1, y2)` is
//!
//! ```text
//! ψ_i(θ) = −DIF̂_i/P̂ − θ − (L̂_i/P̂)(IF̂_i − ∫1{Y_i<y}dy)
//!          + (mean(DIF̂)/P̂²)(1{y1<Y_i<y2} − P̂)
//! ```
//!
//! and θ̂ solves the empirical moment `n⁻¹ Σ ψ_i(θ̂) = 0`. The naive
//! estimator drops the Riesz correction term, which leaves
//! θ̂ = −mean(DIF̂)/P̂. Setting the score mean to zero and the orthogonality
//! of ψ in the nuisances are what the inference layer relies on.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cdf_tools::{indicator_integral, DiffScheme, GridInterp, IntervalU};
use crate::dataset::Dataset;
use crate::error::{OasdError, Result};
use crate::lasso_logit::DistRegFit;
use crate::math::logistic;
use crate::riesz::RieszFit;

/// Intervals with fewer strictly interior observations than this are
/// rejected: P̂² sits in a denominator of the score.
pub const MIN_INTERVAL_COUNT: usize = 5;

/// Which moment condition to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    Adml,
    Naive,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorKind::Adml => write!(f, "adml"),
            EstimatorKind::Naive => write!(f, "naive"),
        }
    }
}

/// Number of observations strictly inside the interval.
pub fn interval_count(data: &Dataset, u: &IntervalU) -> usize {
    data.y.iter().filter(|&&y| u.y1 < y && y < u.y2).count()
}

/// P̂(u) = n⁻¹ Σ 1{y1 < Y_i < y2}; errors when the interval is empty.
pub fn p_hat(data: &Dataset, u: &IntervalU) -> Result<f64> {
    let count = interval_count(data, u);
    if count == 0 {
        return Err(OasdError::EmptyInterval { y1: u.y1, y2: u.y2 });
    }
    Ok(count as f64 / data.n() as f64)
}

/// Estimated nuisances evaluated at every observation for one interval.
#[derive(Debug, Clone)]
pub struct NuisanceBundle {
    pub u: IntervalU,
    pub p_hat: f64,
    pub if_values: Array1<f64>,
    pub dif_values: Array1<f64>,
    pub l_values: Array1<f64>,
    pub indicator_integrals: Array1<f64>,
    pub in_interval: Array1<f64>,
}

impl NuisanceBundle {
    pub fn n(&self) -> usize {
        self.if_values.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.n();
        if self.dif_values.len() != n
            || self.l_values.len() != n
            || self.indicator_integrals.len() != n
            || self.in_interval.len() != n
        {
            return Err(OasdError::Config("bundle component lengths differ".into()));
        }
        if !(self.p_hat > 0.0) {
            return Err(OasdError::EmptyInterval {
                y1: self.u.y1,
                y2: self.u.y2,
            });
        }
        Ok(())
    }

    pub fn mean_dif(&self) -> f64 {
        self.dif_values.sum() / self.n() as f64
    }
}

/// Orthogonal score at a given θ; `mean_dif` is the sample average of the
/// derivative nuisance entering the third term.
pub fn score_psi(bundle: &NuisanceBundle, theta: f64, mean_dif: f64) -> Result<Array1<f64>> {
    bundle.check()?;
    let p = bundle.p_hat;
    let c3 = mean_dif / (p * p);
    let n = bundle.n();
    let mut psi = Array1::zeros(n);
    for i in 0..n {
        psi[i] = -bundle.dif_values[i] / p
            - theta
            - (bundle.l_values[i] / p)
                * (bundle.if_values[i] - bundle.indicator_integrals[i])
            + c3 * (bundle.in_interval[i] - p);
    }
    Ok(psi)
}

/// One interval's estimate with its per-observation score values.
#[derive(Debug, Clone)]
pub struct OasdEstimate {
    pub u: IntervalU,
    pub kind: EstimatorKind,
    pub theta: f64,
    pub psi: Array1<f64>,
    /// sd(ψ)/√n.
    pub se: f64,
    pub p_hat: f64,
    pub n_in_interval: usize,
    pub mean_dif: f64,
}

/// Solves the empirical moment from an assembled bundle. The ADML route
/// keeps the full orthogonal score; the naive route drops the Riesz
/// correction, so θ̂ = −mean(DIF̂)/P̂ while its score still accounts for
/// the estimation of P̂ (without that term the naive standard error
/// degenerates whenever DIF̂ is nearly constant).
pub fn theta_from_bundle(bundle: &NuisanceBundle, kind: EstimatorKind) -> Result<OasdEstimate> {
    bundle.check()?;
    let n = bundle.n();
    let nf = n as f64;
    let p = bundle.p_hat;
    let mean_dif = bundle.mean_dif();
    let c3 = mean_dif / (p * p);

    let contrib = Array1::from_iter((0..n).map(|i| match kind {
        EstimatorKind::Adml => {
            -bundle.dif_values[i] / p
                - (bundle.l_values[i] / p)
                    * (bundle.if_values[i] - bundle.indicator_integrals[i])
                + c3 * (bundle.in_interval[i] - p)
        }
        EstimatorKind::Naive => {
            -bundle.dif_values[i] / p + c3 * (bundle.in_interval[i] - p)
        }
    }));
    let mut theta = contrib.sum() / nf;
    let mut psi = contrib.mapv(|c| c - theta);
    // one re-centering pass keeps the empirical moment at zero to machine
    // precision even for large n
    let residual = psi.sum() / nf;
    theta += residual;
    psi.mapv_inplace(|v| v - residual);

    let var = psi.iter().map(|v| v * v).sum::<f64>() / nf;
    let se = (var / nf).sqrt();
    Ok(OasdEstimate {
        u: bundle.u,
        kind,
        theta,
        psi,
        se,
        p_hat: p,
        n_in_interval: (p * nf).round() as usize,
        mean_dif,
    })
}

/// Shared evaluation engine: precomputes the fitted CDF at every grid point
/// and every treatment shift required by the difference scheme, so that
/// per-interval bundles are cheap and intervals can share work.
pub struct ScoreComputer<'a> {
    pub data: &'a Dataset,
    pub dist_fit: &'a DistRegFit,
    pub riesz_fit: &'a RieszFit,
    pub scheme: &'a DiffScheme,
    pub steps: usize,
    pub interp: GridInterp,
    l_values: Array1<f64>,
    /// `z_cache[slot][grid]`: linear index at (D_i + shift(slot), X_i);
    /// `None` for unusable grid points.
    z_cache: Vec<Vec<Option<Array1<f64>>>>,
    f_cache: Vec<Vec<Option<Array1<f64>>>>,
}

impl<'a> ScoreComputer<'a> {
    pub fn new(
        data: &'a Dataset,
        dist_fit: &'a DistRegFit,
        riesz_fit: &'a RieszFit,
        scheme: &'a DiffScheme,
        steps: usize,
        interp: GridInterp,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(OasdError::Config("quadrature needs J >= 1".into()));
        }
        dist_fit.context.check_compatible(data)?;
        if riesz_fit.context.spec != dist_fit.context.spec
            || riesz_fit.context.n_covariates != dist_fit.context.n_covariates
        {
            return Err(OasdError::SpecMismatch(
                "distribution-regression and Riesz fits use different dictionaries".into(),
            ));
        }
        let n = data.n();
        let n_slots = 2 * scheme.ell + 1;
        let n_grid = dist_fit.y_grid.len();
        let mut z_cache: Vec<Vec<Option<Array1<f64>>>> = vec![vec![None; n_grid]; n_slots];
        let mut f_cache: Vec<Vec<Option<Array1<f64>>>> = vec![vec![None; n_grid]; n_slots];
        for slot in 0..n_slots {
            let shift = Self::slot_shift(slot, scheme);
            for (g, pt) in dist_fit.points.iter().enumerate() {
                if !pt.usable {
                    continue;
                }
                let mut z = Array1::from_elem(n, pt.intercept);
                for &(k, c) in &pt.beta {
                    for i in 0..n {
                        let x = data.x.row(i);
                        z[i] += c * dist_fit.context.eval_column(k, data.d[i] + shift, &x);
                    }
                }
                let f = z.mapv(logistic);
                z_cache[slot][g] = Some(z);
                f_cache[slot][g] = Some(f);
            }
        }
        let l_values = {
            let mut v = Array1::from_elem(n, riesz_fit.intercept);
            for (k, &gk) in riesz_fit.gamma.iter().enumerate() {
                if gk != 0.0 {
                    for i in 0..n {
                        let x = data.x.row(i);
                        v[i] += gk * riesz_fit.context.eval_column(k, data.d[i], &x);
                    }
                }
            }
            v
        };
        Ok(Self {
            data,
            dist_fit,
            riesz_fit,
            scheme,
            steps,
            interp,
            l_values,
            z_cache,
            f_cache,
        })
    }

    /// slot 0 is the unshifted evaluation; slots 1..=ℓ are +l·h and
    /// slots ℓ+1..=2ℓ are −l·h.
    fn slot_shift(slot: usize, scheme: &DiffScheme) -> f64 {
        if slot == 0 {
            0.0
        } else if slot <= scheme.ell {
            slot as f64 * scheme.bandwidth
        } else {
            -((slot - scheme.ell) as f64) * scheme.bandwidth
        }
    }

    fn grid_values(&self, slot: usize, g: usize) -> Result<&Array1<f64>> {
        self.f_cache[slot][g].as_ref().ok_or_else(|| {
            let pt = &self.dist_fit.points[g];
            OasdError::UnusableGridPoint {
                y: pt.y,
                reason: pt.reason.clone().unwrap_or_else(|| "unknown".into()),
            }
        })
    }

    fn grid_index(&self, y: f64, u: &IntervalU) -> Result<usize> {
        self.dist_fit
            .grid_index_at_or_below(y)
            .ok_or(OasdError::IntervalNotCovered {
                y1: u.y1,
                y2: u.y2,
                lo: *self.dist_fit.y_grid.first().unwrap_or(&f64::NAN),
                hi: *self.dist_fit.y_grid.last().unwrap_or(&f64::NAN),
            })
    }

    /// IF̂(u, D_i + shift(slot), X_i) for all observations.
    fn if_all(&self, u: &IntervalU, slot: usize) -> Result<Array1<f64>> {
        if !self.dist_fit.covers(u.y1, u.y2) {
            return Err(OasdError::IntervalNotCovered {
                y1: u.y1,
                y2: u.y2,
                lo: *self.dist_fit.y_grid.first().unwrap_or(&f64::NAN),
                hi: *self.dist_fit.y_grid.last().unwrap_or(&f64::NAN),
            });
        }
        let n = self.data.n();
        let dy = u.width() / self.steps as f64;
        let mut acc = Array1::zeros(n);
        match self.interp {
            GridInterp::Step => {
                // multiplicity of each grid index over the quadrature points
                let mut counts: Vec<(usize, usize)> = Vec::new();
                for j in 1..=self.steps {
                    let yj = (u.y1 + j as f64 * dy).min(u.y2);
                    let idx = self.grid_index(yj, u)?;
                    match counts.last_mut() {
                        Some((i, c)) if *i == idx => *c += 1,
                        _ => counts.push((idx, 1)),
                    }
                }
                for (idx, count) in counts {
                    let f = self.grid_values(slot, idx)?;
                    let w = count as f64;
                    for i in 0..n {
                        acc[i] += w * f[i];
                    }
                }
            }
            GridInterp::Linear => {
                for j in 1..=self.steps {
                    let yj = (u.y1 + j as f64 * dy).min(u.y2);
                    let lo = self.grid_index(yj, u)?;
                    let (hi, frac) = if lo + 1 < self.dist_fit.y_grid.len()
                        && yj > self.dist_fit.y_grid[lo]
                    {
                        let g0 = self.dist_fit.y_grid[lo];
                        let g1 = self.dist_fit.y_grid[lo + 1];
                        (lo + 1, (yj - g0) / (g1 - g0))
                    } else {
                        (lo, 0.0)
                    };
                    let zl = self.z_cache[slot][lo].as_ref().ok_or_else(|| {
                        let pt = &self.dist_fit.points[lo];
                        OasdError::UnusableGridPoint {
                            y: pt.y,
                            reason: pt.reason.clone().unwrap_or_else(|| "unknown".into()),
                        }
                    })?;
                    if hi == lo {
                        for i in 0..n {
                            acc[i] += logistic(zl[i]);
                        }
                    } else {
                        let zh = self.z_cache[slot][hi].as_ref().ok_or_else(|| {
                            let pt = &self.dist_fit.points[hi];
                            OasdError::UnusableGridPoint {
                                y: pt.y,
                                reason: pt.reason.clone().unwrap_or_else(|| "unknown".into()),
                            }
                        })?;
                        for i in 0..n {
                            acc[i] += logistic(zl[i] + frac * (zh[i] - zl[i]));
                        }
                    }
                }
            }
        }
        acc.mapv_inplace(|v| v * dy);
        Ok(acc)
    }

    /// Partial-difference derivative of the CDF integral at every
    /// observation.
    fn dif_all(&self, u: &IntervalU) -> Result<Array1<f64>> {
        let n = self.data.n();
        let mut acc = Array1::zeros(n);
        for l in 1..=self.scheme.ell {
            let up = self.if_all(u, l)?;
            let dn = self.if_all(u, self.scheme.ell + l)?;
            let eta = self.scheme.eta[l - 1];
            for i in 0..n {
                acc[i] += eta * (up[i] - dn[i]);
            }
        }
        acc.mapv_inplace(|v| v / (2.0 * self.scheme.bandwidth));
        Ok(acc)
    }

    /// Assembles the nuisance bundle for one interval.
    pub fn bundle(&self, u: &IntervalU) -> Result<NuisanceBundle> {
        let count = interval_count(self.data, u);
        if count == 0 {
            return Err(OasdError::EmptyInterval { y1: u.y1, y2: u.y2 });
        }
        if count < MIN_INTERVAL_COUNT {
            return Err(OasdError::DegenerateInterval {
                y1: u.y1,
                y2: u.y2,
                count,
                min: MIN_INTERVAL_COUNT,
            });
        }
        let n = self.data.n();
        let p = count as f64 / n as f64;
        let if_values = self.if_all(u, 0)?;
        let dif_values = self.dif_all(u)?;
        let indicator_integrals =
            Array1::from_iter(self.data.y.iter().map(|&y| indicator_integral(y, u)));
        let in_interval = Array1::from_iter(
            self.data
                .y
                .iter()
                .map(|&y| if u.y1 < y && y < u.y2 { 1.0 } else { 0.0 }),
        );
        Ok(NuisanceBundle {
            u: *u,
            p_hat: p,
            if_values,
            dif_values,
            l_values: self.l_values.clone(),
            indicator_integrals,
            in_interval,
        })
    }

    pub fn estimate(&self, u: &IntervalU, kind: EstimatorKind) -> Result<OasdEstimate> {
        theta_from_bundle(&self.bundle(u)?, kind)
    }
}

/// Knobs for the end-to-end nuisance fit behind an estimate.
#[derive(Debug, Clone)]
pub struct NuisanceSettings {
    /// Degree of the interaction dictionary (1 or 2).
    pub degree: u32,
    /// Order ℓ of the partial-difference scheme.
    pub ell: usize,
    /// Riemann steps J for the CDF integral.
    pub steps: usize,
    pub interp: GridInterp,
    /// Number of equally spaced quantile levels forming the outcome grid
    /// (19 gives the ventiles).
    pub grid_points: usize,
    /// Bandwidth override; `None` applies the n^{−1/(4ℓ+2)} rule.
    pub bandwidth: Option<f64>,
    pub dist_reg: crate::lasso_logit::DistRegConfig,
    pub riesz: crate::riesz::RieszConfig,
}

impl Default for NuisanceSettings {
    fn default() -> Self {
        Self {
            degree: 2,
            ell: 1,
            steps: 100,
            interp: GridInterp::Step,
            grid_points: 19,
            bandwidth: None,
            dist_reg: crate::lasso_logit::DistRegConfig::default(),
            riesz: crate::riesz::RieszConfig::default(),
        }
    }
}

/// All fitted nuisance objects for one sample.
pub struct FittedNuisances {
    pub expansion: crate::basis::BasisExpansion,
    pub dist_fit: DistRegFit,
    pub riesz_fit: RieszFit,
    pub scheme: DiffScheme,
    pub steps: usize,
    pub interp: GridInterp,
}

/// Builds the dictionary, fits the distribution regression over the
/// quantile grid (always including `extra_grid_values`, e.g. interval
/// endpoints), fits the Riesz representer, and fixes the difference scheme.
pub fn fit_nuisances(
    data: &Dataset,
    settings: &NuisanceSettings,
    extra_grid_values: &[f64],
) -> Result<FittedNuisances> {
    let spec = crate::basis::BasisSpec::interactions(settings.degree)?;
    let expansion = crate::basis::build_basis(data, &spec)?;

    let sorted = data.sorted_y();
    let g = settings.grid_points.max(1);
    let mut grid: Vec<f64> = (1..=g)
        .map(|j| crate::dataset::empirical_quantile(&sorted, j as f64 / (g + 1) as f64))
        .collect();
    grid.extend_from_slice(extra_grid_values);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    if grid.is_empty() {
        return Err(OasdError::Config("empty outcome grid".into()));
    }

    let dist_fit =
        crate::lasso_logit::fit_distribution_regression(data, &expansion, &grid, &settings.dist_reg)?;
    let riesz_fit = crate::riesz::fit(&expansion, &settings.riesz)?;
    let scheme = match settings.bandwidth {
        Some(h) => DiffScheme::with_bandwidth(settings.ell, h)?,
        None => DiffScheme::new(settings.ell, data.n())?,
    };
    Ok(FittedNuisances {
        expansion,
        dist_fit,
        riesz_fit,
        scheme,
        steps: settings.steps,
        interp: settings.interp,
    })
}

impl FittedNuisances {
    pub fn score_computer<'a>(&'a self, data: &'a Dataset) -> Result<ScoreComputer<'a>> {
        ScoreComputer::new(
            data,
            &self.dist_fit,
            &self.riesz_fit,
            &self.scheme,
            self.steps,
            self.interp,
        )
    }
}

/// Stacks per-interval score vectors into the `n × |U|` matrix consumed by
/// the bootstrap.
pub fn psi_matrix(estimates: &[OasdEstimate]) -> Array2<f64> {
    let n = estimates.first().map(|e| e.psi.len()).unwrap_or(0);
    let mut m = Array2::zeros((n, estimates.len()));
    for (j, est) in estimates.iter().enumerate() {
        for i in 0..n {
            m[[i, j]] = est.psi[i];
        }
    }
    m
}
