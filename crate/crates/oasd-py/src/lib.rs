//! Python bindings: dataset-in, estimates-out, plus the small numeric
//! helpers that are convenient to sanity-check from Python.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use oasd_core::cdf_tools::IntervalU;
use oasd_core::dataset::{empirical_quantile, Dataset};
use oasd_core::estimator::{fit_nuisances, EstimatorKind, NuisanceSettings};
use oasd_core::inference::{run_bootstrap, BootstrapConfig, WeightLaw};
use oasd_core::simulation::{draw_main_dgp, MainDgpConfig};

fn to_py_err(e: oasd_core::OasdError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Coefficients of the central partial-difference scheme of order `ell`.
#[pyfunction]
fn solve_eta(ell: usize) -> PyResult<Vec<f64>> {
    oasd_core::cdf_tools::solve_eta(ell).map_err(to_py_err)
}

/// Bandwidth rule n^(-1/(4*ell+2)).
#[pyfunction]
fn bandwidth(n: usize, ell: usize) -> f64 {
    oasd_core::cdf_tools::bandwidth(n, ell)
}

/// Penalty level 1.1 sqrt(n) * Phi^-1(1 - (0.1/ln n)/(2 p n)).
#[pyfunction]
fn penalty_level(n: usize, p: usize) -> PyResult<f64> {
    oasd_core::lasso_logit::penalty_level(n, p).map_err(to_py_err)
}

/// Closed-form integral of 1{Y < y} over (y1, y2).
#[pyfunction]
fn indicator_integral(y: f64, y1: f64, y2: f64) -> PyResult<f64> {
    let u = IntervalU::new(y1, y2).map_err(to_py_err)?;
    Ok(oasd_core::cdf_tools::indicator_integral(y, &u))
}

/// One draw of the main simulation design; returns (y, d, x).
#[pyfunction]
#[pyo3(signature = (n, k, rd2, ry2, seed))]
fn draw_main_design(
    n: usize,
    k: usize,
    rd2: f64,
    ry2: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let cfg = MainDgpConfig::new(n, k, rd2, ry2, seed).map_err(to_py_err)?;
    let data = draw_main_dgp(&cfg).map_err(to_py_err)?;
    let x = (0..data.n())
        .map(|i| data.x.row(i).to_vec())
        .collect::<Vec<_>>();
    Ok((data.y.to_vec(), data.d.to_vec(), x))
}

/// Per-interval estimate row.
#[pyclass(get_all, skip_from_py_object)]
#[derive(Clone)]
struct IntervalEstimate {
    estimator: String,
    y1: f64,
    y2: f64,
    theta: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
    band_lo: Option<f64>,
    band_hi: Option<f64>,
    p_hat: f64,
    n_in_interval: usize,
}

#[pymethods]
impl IntervalEstimate {
    fn __repr__(&self) -> String {
        format!(
            "IntervalEstimate({}, ({:.4}, {:.4}), theta={:.6}, se={:.6})",
            self.estimator, self.y1, self.y2, self.theta, self.se
        )
    }
}

/// Full result of an estimation run.
#[pyclass(get_all)]
struct EstimateResult {
    rows: Vec<IntervalEstimate>,
    skipped: Vec<String>,
    homogeneity_statistic: Option<f64>,
    homogeneity_p_value: Option<f64>,
    riesz_support_size: usize,
    lasso_penalty: f64,
}

/// Estimates interval effects on in-memory data.
///
/// `x` is row-major (one inner list per observation). `intervals` are
/// (lo, hi) pairs, read as outcome quantile levels when
/// `quantile_intervals` is true.
#[pyfunction]
#[pyo3(signature = (y, d, x, intervals, quantile_intervals=false, degree=2, ell=1,
                    steps=100, draws=500, alpha=0.05, seed=0, estimator="both"))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    y: Vec<f64>,
    d: Vec<f64>,
    x: Vec<Vec<f64>>,
    intervals: Vec<(f64, f64)>,
    quantile_intervals: bool,
    degree: u32,
    ell: usize,
    steps: usize,
    draws: usize,
    alpha: f64,
    seed: u64,
    estimator: &str,
) -> PyResult<EstimateResult> {
    let n = y.len();
    if d.len() != n || x.len() != n {
        return Err(PyValueError::new_err("y, d and x must have equal length"));
    }
    let k = x.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 || x.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err(
            "x must be a non-empty rectangular matrix",
        ));
    }
    let mut flat = Vec::with_capacity(n * k);
    for row in &x {
        flat.extend_from_slice(row);
    }
    let data = Dataset::new(
        Array1::from_vec(y),
        Array1::from_vec(d),
        Array2::from_shape_vec((n, k), flat).map_err(|e| PyValueError::new_err(e.to_string()))?,
    )
    .map_err(to_py_err)?;

    let kinds: Vec<EstimatorKind> = match estimator {
        "adml" => vec![EstimatorKind::Adml],
        "naive" => vec![EstimatorKind::Naive],
        "both" => vec![EstimatorKind::Adml, EstimatorKind::Naive],
        other => {
            return Err(PyValueError::new_err(format!(
                "estimator must be adml, naive or both, got {other:?}"
            )))
        }
    };

    let sorted = data.sorted_y();
    let resolved: Vec<IntervalU> = intervals
        .iter()
        .map(|&(a, b)| {
            let (lo, hi) = if quantile_intervals {
                (
                    empirical_quantile(&sorted, a),
                    empirical_quantile(&sorted, b),
                )
            } else {
                (a, b)
            };
            IntervalU::new(lo, hi).map_err(to_py_err)
        })
        .collect::<PyResult<_>>()?;

    let settings = NuisanceSettings {
        degree,
        ell,
        steps,
        ..NuisanceSettings::default()
    };
    let endpoints: Vec<f64> = resolved.iter().flat_map(|u| [u.y1, u.y2]).collect();
    let fitted = fit_nuisances(&data, &settings, &endpoints).map_err(to_py_err)?;
    let computer = fitted.score_computer(&data).map_err(to_py_err)?;

    let z = oasd_core::math::normal_quantile(1.0 - alpha / 2.0);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut homog: Option<(f64, f64)> = None;
    for kind in kinds {
        let mut estimates = Vec::new();
        for u in &resolved {
            match computer.estimate(u, kind) {
                Ok(e) => estimates.push(e),
                Err(e) => skipped.push(format!("{kind} ({:.4}, {:.4}): {e}", u.y1, u.y2)),
            }
        }
        if estimates.is_empty() {
            continue;
        }
        let boot = run_bootstrap(
            &estimates,
            &BootstrapConfig {
                draws,
                seed,
                law: WeightLaw::Gaussian,
                alpha,
            },
        )
        .map_err(to_py_err)?;
        for (j, est) in estimates.iter().enumerate() {
            let band = boot.bands.uniform[j];
            rows.push(IntervalEstimate {
                estimator: kind.to_string(),
                y1: est.u.y1,
                y2: est.u.y2,
                theta: est.theta,
                se: est.se,
                ci_lo: est.theta - z * est.se,
                ci_hi: est.theta + z * est.se,
                band_lo: band.map(|b| b.0),
                band_hi: band.map(|b| b.1),
                p_hat: est.p_hat,
                n_in_interval: est.n_in_interval,
            });
        }
        if kind == EstimatorKind::Adml {
            homog = boot.homogeneity;
        }
    }
    Ok(EstimateResult {
        rows,
        skipped,
        homogeneity_statistic: homog.map(|h| h.0),
        homogeneity_p_value: homog.map(|h| h.1),
        riesz_support_size: fitted.riesz_fit.support().len(),
        lasso_penalty: fitted.dist_fit.lambda,
    })
}

#[pymodule]
fn oasd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<IntervalEstimate>()?;
    m.add_class::<EstimateResult>()?;
    m.add_function(wrap_pyfunction!(solve_eta, m)?)?;
    m.add_function(wrap_pyfunction!(bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(penalty_level, m)?)?;
    m.add_function(wrap_pyfunction!(indicator_integral, m)?)?;
    m.add_function(wrap_pyfunction!(draw_main_design, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    Ok(())
}
