//! Multiplier bootstrap of the estimated score process, sup-t uniform
//! confidence bands, and the treatment-homogeneity test.
//!
//! Each bootstrap draw multiplies per-observation scores by i.i.d.
//! zero-mean unit-variance weights:
//! `Ẑ*_b(u) = n^{-1/2} Σ_i ξ_i^{(b)} ψ̂_i(u)`. Draws are deterministic
//! given the seed: replicate `b` uses stream `b` of a counter RNG, so the
//! result does not depend on thread scheduling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::empirical_quantile;
use crate::error::{OasdError, Result};
use crate::estimator::{psi_matrix, OasdEstimate};

/// Law of the multiplier weights; all listed laws have zero mean and unit
/// variance except `Zero`, which exists to exercise degenerate paths in
/// tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightLaw {
    Gaussian,
    Rademacher,
    Mammen,
    Zero,
}

impl std::str::FromStr for WeightLaw {
    type Err = OasdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(WeightLaw::Gaussian),
            "rademacher" => Ok(WeightLaw::Rademacher),
            "mammen" => Ok(WeightLaw::Mammen),
            "zero" => Ok(WeightLaw::Zero),
            other => Err(OasdError::Config(format!(
                "unknown multiplier law {other:?}; expected gaussian, rademacher, mammen or zero"
            ))),
        }
    }
}

fn draw_weight<R: Rng>(law: WeightLaw, rng: &mut R) -> f64 {
    match law {
        WeightLaw::Gaussian => StandardNormal.sample(rng),
        WeightLaw::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
        WeightLaw::Mammen => {
            // two-point law: −(√5−1)/2 w.p. (√5+1)/(2√5), else (√5+1)/2
            let s5 = 5.0_f64.sqrt();
            let p = (s5 + 1.0) / (2.0 * s5);
            if rng.random::<f64>() < p {
                -(s5 - 1.0) / 2.0
            } else {
                (s5 + 1.0) / 2.0
            }
        }
        WeightLaw::Zero => 0.0,
    }
}

/// `B × |U|` matrix of multiplier-process draws from an `n × |U|` score
/// matrix. Draw `b` uses its own deterministic RNG stream.
pub fn multiplier_draws(
    psi: &Array2<f64>,
    b: usize,
    seed: u64,
    law: WeightLaw,
) -> Result<Array2<f64>> {
    if b == 0 {
        return Err(OasdError::Config("need at least one bootstrap draw".into()));
    }
    let n = psi.nrows();
    let n_u = psi.ncols();
    if n == 0 || n_u == 0 {
        return Err(OasdError::Config("empty score matrix".into()));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64 + 1);
            let mut acc = vec![0.0; n_u];
            for i in 0..n {
                let xi = draw_weight(law, &mut rng);
                if xi != 0.0 {
                    for u in 0..n_u {
                        acc[u] += xi * psi[[i, u]];
                    }
                }
            }
            for v in acc.iter_mut() {
                *v *= scale;
            }
            acc
        })
        .collect();
    let mut out = Array2::zeros((b, n_u));
    for (r, row) in rows.into_iter().enumerate() {
        for (u, v) in row.into_iter().enumerate() {
            out[[r, u]] = v;
        }
    }
    Ok(out)
}

fn column_sd(draws: &Array2<f64>, u: usize) -> f64 {
    let b = draws.nrows() as f64;
    let col = draws.column(u);
    let mean = col.sum() / b;
    (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b).sqrt()
}

/// Pointwise and uniform sup-t bands from the draws. `n` is the sample size
/// behind the scores (the draws carry the √n scaling). Intervals with zero
/// bootstrap dispersion are excluded and reported.
pub struct BandInfo {
    pub pointwise: Vec<Option<(f64, f64)>>,
    pub uniform: Vec<Option<(f64, f64)>>,
    pub pointwise_crit: Vec<Option<f64>>,
    pub uniform_crit: f64,
    pub sigma: Vec<f64>,
    pub excluded: Vec<usize>,
}

pub fn uniform_band(
    draws: &Array2<f64>,
    thetas: &[f64],
    n: usize,
    alpha: f64,
) -> Result<BandInfo> {
    if !(0.0 < alpha && alpha < 0.5) {
        return Err(OasdError::Config(format!(
            "alpha must be in (0, 0.5), got {alpha}"
        )));
    }
    let n_u = draws.ncols();
    if thetas.len() != n_u {
        return Err(OasdError::Config("theta/draw dimension mismatch".into()));
    }
    let b = draws.nrows();
    let sqrt_n = (n as f64).sqrt();
    let sigma: Vec<f64> = (0..n_u).map(|u| column_sd(draws, u)).collect();
    let excluded: Vec<usize> = (0..n_u).filter(|&u| sigma[u] <= 0.0).collect();

    // studentized absolute draws per interval
    let mut pointwise_crit = vec![None; n_u];
    let mut pointwise = vec![None; n_u];
    let mut sup_stats = vec![0.0_f64; b];
    for u in 0..n_u {
        if sigma[u] <= 0.0 {
            continue;
        }
        let mut abs_t: Vec<f64> = (0..b).map(|r| (draws[[r, u]] / sigma[u]).abs()).collect();
        for (r, v) in abs_t.iter().enumerate() {
            if *v > sup_stats[r] {
                sup_stats[r] = *v;
            }
        }
        abs_t.sort_by(|a, c| a.partial_cmp(c).unwrap());
        let crit = empirical_quantile(&abs_t, 1.0 - alpha);
        pointwise_crit[u] = Some(crit);
        let half = crit * sigma[u] / sqrt_n;
        pointwise[u] = Some((thetas[u] - half, thetas[u] + half));
    }
    let uniform_crit = if excluded.len() == n_u {
        0.0
    } else {
        let mut s = sup_stats;
        s.sort_by(|a, c| a.partial_cmp(c).unwrap());
        empirical_quantile(&s, 1.0 - alpha)
    };
    let uniform = (0..n_u)
        .map(|u| {
            if sigma[u] <= 0.0 {
                None
            } else {
                let half = uniform_crit * sigma[u] / sqrt_n;
                Some((thetas[u] - half, thetas[u] + half))
            }
        })
        .collect();
    Ok(BandInfo {
        pointwise,
        uniform,
        pointwise_crit,
        uniform_crit,
        sigma,
        excluded,
    })
}

/// Treatment-homogeneity test over the interval grid: the statistic is
/// `sup_u √n |θ̂(u) − avg_U θ̂|` and the null law is simulated by
/// `sup_u |Ẑ*_b(u) − avg_U Ẑ*_b|`; the finite-grid average replaces the
/// paper's integral over a continuum of intervals.
pub fn homogeneity_test(draws: &Array2<f64>, thetas: &[f64], n: usize) -> Result<(f64, f64)> {
    let n_u = thetas.len();
    if n_u < 2 {
        return Err(OasdError::Config(
            "homogeneity test needs at least two intervals".into(),
        ));
    }
    if draws.ncols() != n_u {
        return Err(OasdError::Config("theta/draw dimension mismatch".into()));
    }
    let sqrt_n = (n as f64).sqrt();
    let theta_bar = thetas.iter().sum::<f64>() / n_u as f64;
    let stat = thetas
        .iter()
        .map(|t| sqrt_n * (t - theta_bar).abs())
        .fold(0.0_f64, f64::max);
    let b = draws.nrows();
    let mut exceed = 0usize;
    for r in 0..b {
        let row = draws.row(r);
        let bar = row.sum() / n_u as f64;
        let s = row.iter().map(|v| (v - bar).abs()).fold(0.0_f64, f64::max);
        if s >= stat {
            exceed += 1;
        }
    }
    Ok((stat, exceed as f64 / b as f64))
}

/// Full bootstrap output for a grid of interval estimates.
pub struct BootstrapResult {
    pub draws: Array2<f64>,
    pub bands: BandInfo,
    /// (statistic, p-value); `None` when fewer than two intervals.
    pub homogeneity: Option<(f64, f64)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub seed: u64,
    pub law: WeightLaw,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            seed: 0,
            law: WeightLaw::Gaussian,
            alpha: 0.05,
        }
    }
}

/// Bootstraps a set of per-interval estimates that share the same sample.
pub fn run_bootstrap(estimates: &[OasdEstimate], cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    if estimates.is_empty() {
        return Err(OasdError::Config("no estimates to bootstrap".into()));
    }
    let n = estimates[0].psi.len();
    let mut warnings = Vec::new();
    if cfg.draws < 100 {
        warnings.push(format!(
            "only {} bootstrap draws; quantiles will be coarse",
            cfg.draws
        ));
    }
    let psi = psi_matrix(estimates);
    let draws = multiplier_draws(&psi, cfg.draws, cfg.seed, cfg.law)?;
    let thetas: Vec<f64> = estimates.iter().map(|e| e.theta).collect();
    let bands = uniform_band(&draws, &thetas, n, cfg.alpha)?;
    if !bands.excluded.is_empty() {
        warnings.push(format!(
            "{} interval(s) excluded from the bands: zero bootstrap dispersion",
            bands.excluded.len()
        ));
    }
    let homogeneity = if thetas.len() >= 2 {
        Some(homogeneity_test(&draws, &thetas, n)?)
    } else {
        None
    };
    Ok(BootstrapResult {
        draws,
        bands,
        homogeneity,
        warnings,
    })
}
