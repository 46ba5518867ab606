//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success. The Monte Carlo criteria run at desk scale (100 replications)
//! and dominate the runtime.

mod common;

use common::{penalized_logit_objective, refine_grid_search, GaussianDesign};
use ndarray::{Array1, Array2};
use oasd_core::basis::{build_basis, BasisSpec};
use oasd_core::cdf_tools::{solve_eta, DiffScheme, IntervalU};
use oasd_core::dataset::empirical_quantile;
use oasd_core::estimator::{
    fit_nuisances, score_psi, theta_from_bundle, EstimatorKind, NuisanceBundle, NuisanceSettings,
};
use oasd_core::inference::{multiplier_draws, uniform_band, WeightLaw};
use oasd_core::lasso_logit::{
    fit_penalized_logit, floor_loadings, initial_loadings, penalty_level,
};
use oasd_core::math::{normal_cdf, normal_cdf_antiderivative};
use oasd_core::riesz::{compute_moments, fit_riesz};
use oasd_core::simulation::{
    decile_bands, run_derivative_comparison, run_main_mc, DerivativeComparisonSettings,
    MainDgpConfig, McSettings, SparsityDesign,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn pass(criterion: &str, detail: String) {
    println!("ACCEPTANCE {criterion}: PASS — {detail}");
}

#[test]
fn criterion_1_eta_coefficients_exact() {
    let cases: [(usize, &[f64]); 3] = [
        (1, &[1.0]),
        (2, &[4.0 / 3.0, -1.0 / 6.0]),
        (3, &[1.5, -0.3, 1.0 / 30.0]),
    ];
    for (ell, want) in cases {
        let eta = solve_eta(ell).unwrap();
        for (k, w) in want.iter().enumerate() {
            assert!(
                (eta[k] - w).abs() < 1e-12,
                "eta[{k}] = {} for ell = {ell}, want {w}",
                eta[k]
            );
        }
    }
    pass("1", "difference-scheme coefficients reproduce the reference values to 1e-12".into());
}

const DESIGN: GaussianDesign = GaussianDesign { a: 0.5, c: 0.4 };

#[test]
fn criterion_2_score_mean_zero_and_orthogonality() {
    // (a) mean(ψ̂) = 0 to 1e-10 on every estimate of a fitted pipeline
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let n = 400;
    let (ys, ds, xs) = DESIGN.draw(n, &mut rng);
    let data = oasd_core::Dataset::new(
        Array1::from_vec(ys.clone()),
        Array1::from_vec(ds.clone()),
        Array2::from_shape_vec((n, 1), xs.clone()).unwrap(),
    )
    .unwrap();
    let sorted = data.sorted_y();
    let bands = [(0.2, 0.4), (0.4, 0.6), (0.6, 0.8)];
    let endpoints: Vec<f64> = bands
        .iter()
        .flat_map(|&(a, b)| {
            [
                empirical_quantile(&sorted, a),
                empirical_quantile(&sorted, b),
            ]
        })
        .collect();
    let fitted = fit_nuisances(&data, &NuisanceSettings::default(), &endpoints).unwrap();
    let computer = fitted.score_computer(&data).unwrap();
    for &(a, b) in &bands {
        for kind in [EstimatorKind::Adml, EstimatorKind::Naive] {
            let u = IntervalU::new(
                empirical_quantile(&sorted, a),
                empirical_quantile(&sorted, b),
            )
            .unwrap();
            let est = computer.estimate(&u, kind).unwrap();
            let mean = est.psi.sum() / est.psi.len() as f64;
            assert!(
                mean.abs() < 1e-10,
                "mean psi = {mean} for {kind} on ({a}, {b})"
            );
        }
    }

    // (b) Gateaux sensitivity in the nuisances is quadratic, not linear
    let mut rng = ChaCha8Rng::seed_from_u64(502);
    let n = 200_000;
    let (ys, ds, xs) = DESIGN.draw(n, &mut rng);
    let mut sorted = ys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (y1, y2) = (
        empirical_quantile(&sorted, 0.3),
        empirical_quantile(&sorted, 0.7),
    );
    let bundle = DESIGN.exact_bundle(&ys, &ds, &xs, y1, y2);
    let est = theta_from_bundle(&bundle, EstimatorKind::Adml).unwrap();
    let apply = |t: f64| -> NuisanceBundle {
        let amp = 4.0;
        let mut out = bundle.clone();
        for i in 0..bundle.n() {
            let (d, x) = (ds[i], xs[i]);
            out.if_values[i] += t * amp * (0.4 + 0.5 * d.sin()) * (1.0 + 0.3 * x.cos());
            out.dif_values[i] += t * amp * 0.5 * d.cos() * (1.0 + 0.3 * x.cos());
            out.l_values[i] += t * amp * (0.6 * d.sin() + 0.3);
        }
        out.p_hat = bundle.p_hat * (1.0 + 0.5 * amp * t);
        out
    };
    let m0 = score_psi(&bundle, est.theta, bundle.mean_dif())
        .unwrap()
        .sum()
        / n as f64;
    let ts = [-0.02, -0.01, 0.01, 0.02];
    let (mut s_tt, mut s_tq, mut s_qq, mut s_ty, mut s_qy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &t in &ts {
        let pb = apply(t);
        let y = score_psi(&pb, est.theta, pb.mean_dif()).unwrap().sum() / n as f64 - m0;
        let q = t * t;
        s_tt += t * t;
        s_tq += t * q;
        s_qq += q * q;
        s_ty += t * y;
        s_qy += q * y;
    }
    let det = s_tt * s_qq - s_tq * s_tq;
    let c1 = (s_ty * s_qq - s_qy * s_tq) / det;
    let c2 = (s_tt * s_qy - s_tq * s_ty) / det;
    assert!(c2.abs() > 1e-6, "quadratic coefficient degenerate");
    assert!(
        c1.abs() < 0.1 * (c2 * 0.02_f64).abs(),
        "linear Gateaux coefficient too large: c1 = {c1}, c2 = {c2}"
    );
    pass(
        "2",
        format!("mean(ψ̂) = 0 on every estimate; Gateaux linear/quadratic = {:.2e}/{:.2e}", c1, c2),
    );
}

#[test]
fn criterion_3_polynomial_exactness() {
    let coefs = [0.7, -1.3, 0.42, 0.11, -0.05, 0.023, -0.004];
    for ell in 1..=3usize {
        let scheme = DiffScheme::with_bandwidth(ell, 0.2).unwrap();
        let deg = 2 * ell;
        let poly = |d: f64| -> f64 { (0..=deg).map(|m| coefs[m] * d.powi(m as i32)).sum() };
        let dpoly = |d: f64| -> f64 {
            (1..=deg)
                .map(|m| m as f64 * coefs[m] * d.powi(m as i32 - 1))
                .sum()
        };
        for d in [-1.7, -0.4, 0.0, 0.8, 1.9] {
            let got = scheme.apply(d, poly);
            let want = dpoly(d);
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(
                rel < 1e-10,
                "ell = {ell}, d = {d}: got {got}, want {want} (rel {rel})"
            );
        }
    }
    pass(
        "3",
        "degree ≤ 2ℓ integrands recovered to 1e-10 relative for ℓ ∈ {1,2,3}".into(),
    );
}

#[test]
fn criterion_4_lasso_oracle_equivalence() {
    // penalized logistic on p = 3
    let mut rng = ChaCha8Rng::seed_from_u64(504);
    let n = 40;
    let d = Array1::from_iter((0..n).map(|_| rng.random_range(-2.0..2.0_f64)));
    let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0_f64));
    let data = oasd_core::Dataset::new(Array1::zeros(n), d, x).unwrap();
    let spec = BasisSpec::interactions(1).unwrap();
    let b = build_basis(&data, &spec).unwrap();
    let ind = Array1::from_iter((0..n).map(|i| {
        let z = 1.3 * b.columns[[i, 0]] - 0.6 * b.columns[[i, 1]];
        if rng.random_range(0.0..1.0_f64) < oasd_core::math::logistic(z) {
            1.0
        } else {
            0.0
        }
    }));
    let lambda = penalty_level(n, b.p()).unwrap();
    let mut loadings = initial_loadings(&b);
    floor_loadings(&mut loadings);
    let fit = fit_penalized_logit(&ind, &b, lambda, &loadings, None).unwrap();
    let mut params = vec![fit.intercept];
    params.extend(fit.beta.iter());
    let obj_fit = penalized_logit_objective(&b.columns.view(), &ind, lambda, &loadings, &params);
    let (obj_oracle, _) = refine_grid_search(vec![0.0; b.p() + 1], 4.0, 9, 40, |p| {
        penalized_logit_objective(&b.columns.view(), &ind, lambda, &loadings, p)
    });
    assert!(
        (obj_fit - obj_oracle).abs() < 1e-6,
        "logit objective {obj_fit} vs oracle {obj_oracle}"
    );

    // Riesz objective on p = 3 with a binding penalty
    let (m_hat, g_hat) = compute_moments(&b);
    let lam = 0.07;
    let gamma = fit_riesz(&m_hat, &g_hat, lam).unwrap();
    let obj_r = common::riesz_objective_at(&m_hat, &g_hat, lam, gamma.as_slice().unwrap());
    let (obj_r_oracle, _) = refine_grid_search(vec![0.0; 3], 4.0, 9, 45, |p| {
        common::riesz_objective_at(&m_hat, &g_hat, lam, p)
    });
    assert!(
        (obj_r - obj_r_oracle).abs() < 1e-6,
        "riesz objective {obj_r} vs oracle {obj_r_oracle}"
    );

    // λ̃ = 0 matches the direct linear solve to 1e-8
    let gamma0 = fit_riesz(&m_hat, &g_hat, 0.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|r| (0..3).map(|c| g_hat[[r, c]]).collect())
        .collect();
    let direct = oasd_core_linalg_solve(rows, m_hat.to_vec());
    for k in 0..3 {
        assert!(
            (gamma0[k] - direct[k]).abs() < 1e-8,
            "gamma[{k}] = {} vs direct {}",
            gamma0[k],
            direct[k]
        );
    }
    pass(
        "4",
        "penalized logit and Riesz objectives within 1e-6 of grid-search oracles; λ̃=0 matches the linear solve to 1e-8".into(),
    );
}

// small Gaussian elimination, independent of the library's solver
fn oasd_core_linalg_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

/// Table 5.1 ADML coverage column for R_d² = R_y² = 0.1 (bands 5–15% to
/// 85–95%).
const TABLE_5_1_ADML_CVG: [f64; 9] = [
    0.952, 0.938, 0.946, 0.952, 0.960, 0.942, 0.944, 0.952, 0.956,
];

#[test]
fn criterion_5_monte_carlo_reproduction() {
    let start = std::time::Instant::now();

    // smoke tier first: 10 replications must finish quickly
    let smoke_cfg = MainDgpConfig::new(500, 30, 0.1, 0.1, 7).unwrap();
    let smoke = run_main_mc(
        &smoke_cfg,
        &decile_bands(),
        &McSettings {
            reps: 10,
            oracle_n: 200_000,
            ..McSettings::default()
        },
    )
    .unwrap();
    assert!(smoke.cells.iter().all(|c| c.reps_used == 10));
    let smoke_elapsed = start.elapsed();
    assert!(
        smoke_elapsed.as_secs() < 900,
        "smoke tier took {smoke_elapsed:?}"
    );

    // cell (0.1, 0.1): ADML coverage within ±0.06 of Table 5.1 per band and
    // ADML MSE no worse than naive in at least 7 of 9 bands
    let cfg = MainDgpConfig::new(500, 30, 0.1, 0.1, 7).unwrap();
    let report = run_main_mc(
        &cfg,
        &decile_bands(),
        &McSettings {
            reps: 100,
            oracle_n: 1_000_000,
            ..McSettings::default()
        },
    )
    .unwrap();
    let mut mse_ok = 0;
    for (b_idx, _) in report.bands.iter().enumerate() {
        let adml = report.cell(b_idx, EstimatorKind::Adml).unwrap();
        let naive = report.cell(b_idx, EstimatorKind::Naive).unwrap();
        let target = TABLE_5_1_ADML_CVG[b_idx];
        assert!(
            (adml.coverage - target).abs() <= 0.06,
            "band {b_idx}: ADML coverage {} vs table {target}",
            adml.coverage
        );
        if adml.mse <= naive.mse {
            mse_ok += 1;
        }
    }
    assert!(mse_ok >= 7, "ADML mse beat naive in only {mse_ok} of 9 bands");

    // cell (0.4, 0.4): the naive bias ratio at the 15–25% band dominates
    // the ADML bias ratio in magnitude
    let cfg44 = MainDgpConfig::new(500, 30, 0.4, 0.4, 7).unwrap();
    let report44 = run_main_mc(
        &cfg44,
        &decile_bands(),
        &McSettings {
            reps: 100,
            oracle_n: 1_000_000,
            ..McSettings::default()
        },
    )
    .unwrap();
    let adml44 = report44.cell(1, EstimatorKind::Adml).unwrap();
    let naive44 = report44.cell(1, EstimatorKind::Naive).unwrap();
    assert!(
        naive44.bias_ratio.abs() > adml44.bias_ratio.abs(),
        "15–25% band: |naive bias| {} should exceed |ADML bias| {}",
        naive44.bias_ratio.abs(),
        adml44.bias_ratio.abs()
    );
    pass(
        "5",
        format!(
            "cell (0.1,0.1) coverage within ±0.06 of Table 5.1 on all bands, mse ordering {mse_ok}/9; cell (0.4,0.4) 15–25% |bias|: naive {:.3} > adml {:.3}; total {:.0}s",
            naive44.bias_ratio.abs(),
            adml44.bias_ratio.abs(),
            start.elapsed().as_secs_f64()
        ),
    );
}

/// Table B.1, DGP 1 design (i): reference MeanDist values at τ = 0.8, 0.9.
const TABLE_B1_OURS: [f64; 2] = [0.020, 0.041];
const TABLE_B1_COMPARATOR: [f64; 2] = [0.206, 0.607];

#[test]
fn criterion_6_derivative_comparison() {
    let report = run_derivative_comparison(
        1,
        SparsityDesign::I,
        &DerivativeComparisonSettings {
            reps: 50,
            seed: 11,
            ..DerivativeComparisonSettings::default()
        },
    )
    .unwrap();
    assert_eq!(report.reps, 50);
    for (pos, tau_idx) in [(0usize, 7usize), (1, 8)] {
        let tau = report.taus[tau_idx];
        let pd = report.mean_dist_partial[tau_idx];
        let direct = report.mean_dist_direct[tau_idx];
        assert!(
            pd < direct,
            "tau = {tau}: partial-difference {pd} should beat direct {direct}"
        );
        // magnitudes only within order-of-magnitude of the reference table:
        // the comparator replaces the original fitting procedure by ours
        assert!(
            pd <= 5.0 * TABLE_B1_OURS[pos],
            "tau = {tau}: partial-difference MeanDist {pd} exceeds 5× table"
        );
        assert!(
            direct <= 5.0 * TABLE_B1_COMPARATOR[pos],
            "tau = {tau}: direct MeanDist {direct} exceeds 5× table"
        );
    }
    pass(
        "6",
        format!(
            "partial difference beats direct differentiation at τ = 0.8 ({:.4} < {:.4}) and τ = 0.9 ({:.4} < {:.4})",
            report.mean_dist_partial[7],
            report.mean_dist_direct[7],
            report.mean_dist_partial[8],
            report.mean_dist_direct[8]
        ),
    );
}

#[test]
fn criterion_7_bootstrap_calibration() {
    // uniform critical value against the analytic max-of-9 quantile
    let mut rng = ChaCha8Rng::seed_from_u64(507);
    let n = 6000;
    let mut psi = Array2::zeros((n, 9));
    for i in 0..n {
        for u in 0..9 {
            psi[[i, u]] = StandardNormal.sample(&mut rng);
        }
    }
    let draws = multiplier_draws(&psi, 8000, 11, WeightLaw::Gaussian).unwrap();
    let info = uniform_band(&draws, &[0.0; 9], n, 0.05).unwrap();
    let analytic = 2.7655295843397569778;
    assert!(
        (info.uniform_crit - analytic).abs() < 0.05,
        "uniform critical value {} vs analytic {analytic}",
        info.uniform_crit
    );

    // degenerate multiplier law gives exactly zero draws
    let zero = multiplier_draws(&psi, 200, 11, WeightLaw::Zero).unwrap();
    assert!(zero.iter().all(|v| *v == 0.0));
    pass(
        "7",
        format!(
            "sup-t critical value {:.4} within 0.05 of {:.4}; ξ ≡ 0 yields zero draws",
            info.uniform_crit, analytic
        ),
    );
}

#[test]
fn criterion_8_double_robustness() {
    let mut rng = ChaCha8Rng::seed_from_u64(508);
    let n = 10_000;
    let (ys, ds, xs) = DESIGN.draw(n, &mut rng);
    let mut sorted = ys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (y1, y2) = (
        empirical_quantile(&sorted, 0.35),
        empirical_quantile(&sorted, 0.65),
    );
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(5080);
    let (theta_oracle, oracle_se) = DESIGN.oracle_theta(y1, y2, 4_000_000, &mut oracle_rng);

    // wrong Riesz representer, exact CDF nuisances
    let mut wrong_l = DESIGN.exact_bundle(&ys, &ds, &xs, y1, y2);
    for i in 0..n {
        wrong_l.l_values[i] = 0.6 * ds[i].sin() + 0.3;
    }
    let est_l = theta_from_bundle(&wrong_l, EstimatorKind::Adml).unwrap();
    let tol_l = 5.0 * (est_l.se * est_l.se + oracle_se * oracle_se).sqrt();
    assert!(
        (est_l.theta - theta_oracle).abs() < tol_l,
        "wrong-L: {} vs {} (tol {tol_l})",
        est_l.theta,
        theta_oracle
    );

    // wrong CDF nuisances (coherent IF/DIF pair), exact Riesz representer
    let mut wrong_if = DESIGN.exact_bundle(&ys, &ds, &xs, y1, y2);
    for i in 0..n {
        let (d, x) = (ds[i], xs[i]);
        let mu = DESIGN.mu(d, x) + 1.2 * d.sin();
        let mu_d = DESIGN.mu_d(x) + 1.2 * d.cos();
        wrong_if.if_values[i] =
            normal_cdf_antiderivative(y2 - mu) - normal_cdf_antiderivative(y1 - mu);
        wrong_if.dif_values[i] = -mu_d * (normal_cdf(y2 - mu) - normal_cdf(y1 - mu));
    }
    let est_if = theta_from_bundle(&wrong_if, EstimatorKind::Adml).unwrap();
    let tol_if = 5.0 * (est_if.se * est_if.se + oracle_se * oracle_se).sqrt();
    assert!(
        (est_if.theta - theta_oracle).abs() < tol_if,
        "wrong-IF: {} vs {} (tol {tol_if})",
        est_if.theta,
        theta_oracle
    );
    pass(
        "8",
        format!(
            "θ̂ stays within 5 SE of the oracle under either single misspecification ({:.4} / {:.4} vs {:.4})",
            est_l.theta, est_if.theta, theta_oracle
        ),
    );
}

#[test]
fn criterion_9_byte_identical_reruns() {
    let exe = env!("CARGO_BIN_EXE_oasd");
    let dir = tempfile::tempdir().unwrap();

    // small estimate fixture
    let input = dir.path().join("data.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(509);
    let mut csv = String::from("y,d,x1,x2\n");
    for _ in 0..250 {
        let x1 = rng.random_range(-2.0..2.0_f64);
        let x2 = rng.random_range(-2.0..2.0_f64);
        let d = 0.5 * x1 + rng.random_range(-1.0..1.0_f64);
        let y = d + x2 + rng.random_range(-1.0..1.0_f64);
        csv.push_str(&format!("{y},{d},{x1},{x2}\n"));
    }
    std::fs::write(&input, csv).unwrap();

    let run_cmd = |args: &[&str]| {
        let out = std::process::Command::new(exe)
            .args(args)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "command failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    for tag in ["a", "b"] {
        run_cmd(&[
            "estimate",
            "--input",
            input.to_str().unwrap(),
            "--outcome",
            "y",
            "--treatment",
            "d",
            "--intervals",
            "q0.3:q0.5,q0.5:q0.7",
            "--B",
            "300",
            "--seed",
            "99",
            "--grid-points",
            "9",
            "--out",
            dir.path().join(format!("est_{tag}")).to_str().unwrap(),
        ]);
        run_cmd(&[
            "simulate",
            "--rd2",
            "0.2",
            "--ry2",
            "0.2",
            "--n",
            "150",
            "--k",
            "2",
            "--reps",
            "3",
            "--oracle-n",
            "20000",
            "--seed",
            "99",
            "--out",
            dir.path().join(format!("sim_{tag}")).to_str().unwrap(),
        ]);
        run_cmd(&[
            "compare-derivative",
            "--dgp",
            "1",
            "--design",
            "i",
            "--reps",
            "2",
            "--n",
            "200",
            "--p",
            "10",
            "--seed",
            "99",
            "--out",
            dir.path().join(format!("cmp_{tag}")).to_str().unwrap(),
        ]);
    }
    for stem in ["est", "sim", "cmp"] {
        for ext in ["json", "txt"] {
            let a = std::fs::read(dir.path().join(format!("{stem}_a.{ext}"))).unwrap();
            let b = std::fs::read(dir.path().join(format!("{stem}_b.{ext}"))).unwrap();
            assert_eq!(a, b, "{stem}.{ext} differs between identical reruns");
        }
    }
    pass(
        "9",
        "estimate, simulate and compare-derivative reruns are byte-identical for a fixed seed".into(),
    );
}
