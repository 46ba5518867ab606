//! Shared oracle machinery for the integration tests. Everything here is
//! deliberately independent of the library's solver paths: brute-force grid
//! refinement for optimization oracles and closed-form Gaussian nuisances
//! for the estimator checks.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use oasd_core::math::{log1pexp, normal_cdf, normal_cdf_antiderivative, normal_pdf};

/// Derivative-free minimizer: an iteratively refined full grid around the
/// incumbent. Convex objectives land within `radius·shrink^rounds` of the
/// minimizer, independent of any gradient code in the library.
pub fn refine_grid_search<F: FnMut(&[f64]) -> f64>(
    start: Vec<f64>,
    init_radius: f64,
    points_per_dim: usize,
    rounds: usize,
    mut f: F,
) -> (f64, Vec<f64>) {
    assert!(points_per_dim >= 3 && points_per_dim % 2 == 1);
    let dim = start.len();
    let mut center = start;
    let mut best = f(&center);
    let mut radius = init_radius;
    let m = points_per_dim;
    for _ in 0..rounds {
        let mut arg_best = center.clone();
        let mut round_best = best;
        let mut idx = vec![0usize; dim];
        let total = m.pow(dim as u32);
        let mut point = vec![0.0; dim];
        for flat in 0..total {
            let mut rem = flat;
            for d in 0..dim {
                idx[d] = rem % m;
                rem /= m;
            }
            for d in 0..dim {
                let frac = idx[d] as f64 / (m - 1) as f64 * 2.0 - 1.0;
                point[d] = center[d] + frac * radius;
            }
            let v = f(&point);
            if v < round_best {
                round_best = v;
                arg_best = point.clone();
            }
        }
        center = arg_best;
        best = round_best;
        radius *= 0.65;
    }
    (best, center)
}

/// Penalized logistic objective: mean negative log-likelihood plus
/// (λ/n)·Σ ψ_k |β_k| with an unpenalized leading intercept.
pub fn penalized_logit_objective(
    columns: &ArrayView2<f64>,
    indicator: &Array1<f64>,
    lambda: f64,
    loadings: &Array1<f64>,
    params: &[f64],
) -> f64 {
    let n = indicator.len();
    let p = columns.ncols();
    assert_eq!(params.len(), p + 1);
    let mut nll = 0.0;
    for i in 0..n {
        let mut z = params[0];
        for k in 0..p {
            z += params[k + 1] * columns[[i, k]];
        }
        nll += log1pexp(z) - indicator[i] * z;
    }
    let mut pen = 0.0;
    for k in 0..p {
        pen += loadings[k] * params[k + 1].abs();
    }
    nll / n as f64 + lambda / n as f64 * pen
}

/// Riesz objective −2M̂'γ + γ'Ĝγ + 2λ̃‖γ‖₁ for the oracle search.
pub fn riesz_objective_at(
    m_hat: &Array1<f64>,
    g_hat: &Array2<f64>,
    lambda_tilde: f64,
    gamma: &[f64],
) -> f64 {
    let p = m_hat.len();
    let mut lin = 0.0;
    let mut quad = 0.0;
    let mut l1 = 0.0;
    for k in 0..p {
        lin += m_hat[k] * gamma[k];
        l1 += gamma[k].abs();
        for j in 0..p {
            quad += gamma[k] * g_hat[[k, j]] * gamma[j];
        }
    }
    -2.0 * lin + quad + 2.0 * lambda_tilde * l1
}

/// One-covariate Gaussian design with analytic nuisances:
/// X ~ N(0,1), D = a·X + V, Y = D + X + c·D·X + U with V, U ~ N(0,1).
/// The structural derivative is 1 + c·X.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDesign {
    pub a: f64,
    pub c: f64,
}

impl GaussianDesign {
    pub fn mu(&self, d: f64, x: f64) -> f64 {
        d + x + self.c * d * x
    }

    pub fn mu_d(&self, x: f64) -> f64 {
        1.0 + self.c * x
    }

    /// F(y | d, x) = Φ(y − μ).
    pub fn cdf(&self, y: f64, d: f64, x: f64) -> f64 {
        normal_cdf(y - self.mu(d, x))
    }

    /// ∫_{y1}^{y2} Φ(y − μ) dy in closed form.
    pub fn integral_cdf(&self, y1: f64, y2: f64, d: f64, x: f64) -> f64 {
        let mu = self.mu(d, x);
        normal_cdf_antiderivative(y2 - mu) - normal_cdf_antiderivative(y1 - mu)
    }

    /// ∂_d of the integral: −μ_d (Φ(y2−μ) − Φ(y1−μ)).
    pub fn diff_integral_cdf(&self, y1: f64, y2: f64, d: f64, x: f64) -> f64 {
        let mu = self.mu(d, x);
        -self.mu_d(x) * (normal_cdf(y2 - mu) - normal_cdf(y1 - mu))
    }

    /// L(d, x) = ∂_d ln f(d | x) = −(d − a·x).
    pub fn score_l(&self, d: f64, x: f64) -> f64 {
        -(d - self.a * x)
    }

    pub fn draw<R: rand::Rng>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        use rand_distr::{Distribution, StandardNormal};
        let mut xs = Vec::with_capacity(n);
        let mut ds = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(rng);
            let v: f64 = StandardNormal.sample(rng);
            let u: f64 = StandardNormal.sample(rng);
            let d = self.a * x + v;
            xs.push(x);
            ds.push(d);
            ys.push(self.mu(d, x) + u);
        }
        (ys, ds, xs)
    }

    /// Brute-force E[1 + c·X | Y ∈ (y1, y2)] over `draws` fresh samples;
    /// returns (estimate, mc standard error).
    pub fn oracle_theta<R: rand::Rng>(
        &self,
        y1: f64,
        y2: f64,
        draws: usize,
        rng: &mut R,
    ) -> (f64, f64) {
        use rand_distr::{Distribution, StandardNormal};
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let mut count = 0usize;
        for _ in 0..draws {
            let x: f64 = StandardNormal.sample(rng);
            let v: f64 = StandardNormal.sample(rng);
            let u: f64 = StandardNormal.sample(rng);
            let d = self.a * x + v;
            let y = self.mu(d, x) + u;
            if y1 < y && y < y2 {
                let g = 1.0 + self.c * x;
                acc += g;
                acc2 += g * g;
                count += 1;
            }
        }
        assert!(count > 1, "oracle interval is empty");
        let mean = acc / count as f64;
        let var = acc2 / count as f64 - mean * mean;
        (mean, (var / count as f64).sqrt())
    }

    /// Exact nuisance bundle at the observed sample.
    pub fn exact_bundle(
        &self,
        ys: &[f64],
        ds: &[f64],
        xs: &[f64],
        y1: f64,
        y2: f64,
    ) -> oasd_core::estimator::NuisanceBundle {
        let n = ys.len();
        let u = oasd_core::cdf_tools::IntervalU::new(y1, y2).unwrap();
        let in_interval: Array1<f64> = (0..n)
            .map(|i| if y1 < ys[i] && ys[i] < y2 { 1.0 } else { 0.0 })
            .collect();
        let p_hat = in_interval.sum() / n as f64;
        oasd_core::estimator::NuisanceBundle {
            u,
            p_hat,
            if_values: (0..n)
                .map(|i| self.integral_cdf(y1, y2, ds[i], xs[i]))
                .collect(),
            dif_values: (0..n)
                .map(|i| self.diff_integral_cdf(y1, y2, ds[i], xs[i]))
                .collect(),
            l_values: (0..n).map(|i| self.score_l(ds[i], xs[i])).collect(),
            indicator_integrals: (0..n)
                .map(|i| oasd_core::cdf_tools::indicator_integral(ys[i], &u))
                .collect(),
            in_interval,
            }
    }
}

/// Normal density helper re-export for test assertions.
pub fn phi(x: f64) -> f64 {
    normal_pdf(x)
}
