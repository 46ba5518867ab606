//! Polynomial dictionary over (treatment, covariates) with exact analytic
//! treatment derivatives.
//!
//! Two layouts are supported. `Interactions` is the quadratic dictionary
//! with all first-order, second-order and pairwise-interaction terms in the
//! deterministic order
//!
//! ```text
//! D, X_1..X_K, D², X_1²..X_K², D·X_1..D·X_K, X_1X_2, ..., X_{K-1}X_K
//! ```
//!
//! `Powers` is the pure power expansion `D, X_1..X_K, D², X_1²..X_K², ...`
//! up to a given degree with no cross terms, used by the derivative
//! comparison harness. Refitting with the same spec reproduces the matrices
//! bit for bit.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{OasdError, Result};

/// Dictionary layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// First- and second-order terms plus all pairwise interactions.
    Interactions,
    /// Pure powers of each variable, no cross terms.
    Powers,
}

/// Configuration of the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: u32,
    pub kind: BasisKind,
    pub include_treatment: bool,
    pub standardize: bool,
}

impl BasisSpec {
    /// Quadratic interaction dictionary; `degree` must be 1 or 2.
    pub fn interactions(degree: u32) -> Result<Self> {
        if !(1..=2).contains(&degree) {
            return Err(OasdError::Config(format!(
                "interaction basis supports degree 1 or 2, got {degree}"
            )));
        }
        Ok(Self {
            degree,
            kind: BasisKind::Interactions,
            include_treatment: true,
            standardize: true,
        })
    }

    /// Pure power dictionary; `degree` must be in 1..=3.
    pub fn powers(degree: u32) -> Result<Self> {
        if !(1..=3).contains(&degree) {
            return Err(OasdError::Config(format!(
                "power basis supports degree 1..=3, got {degree}"
            )));
        }
        Ok(Self {
            degree,
            kind: BasisKind::Powers,
            include_treatment: true,
            standardize: true,
        })
    }

    pub fn with_standardize(mut self, standardize: bool) -> Self {
        self.standardize = standardize;
        self
    }

    /// Number of dictionary columns for `k` raw covariates.
    pub fn dim(&self, k: usize) -> usize {
        match self.kind {
            BasisKind::Interactions => match self.degree {
                1 => k + 1,
                _ => 2 * (k + 1) + (k + 1) * k / 2,
            },
            BasisKind::Powers => (self.degree as usize) * (k + 1),
        }
    }
}

/// One dictionary column, by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    /// Raw treatment `d`.
    D,
    /// Raw covariate `x_j` (0-based).
    X(usize),
    /// `d^m`, m ≥ 2.
    DPow(i32),
    /// `x_j^m`, m ≥ 2.
    XPow(usize, i32),
    /// `d · x_j`.
    DX(usize),
    /// `x_i · x_j`, i < j.
    XX(usize, usize),
}

impl Term {
    #[inline]
    pub fn eval(&self, d: f64, x: &ArrayView1<f64>) -> f64 {
        match *self {
            Term::D => d,
            Term::X(j) => x[j],
            Term::DPow(m) => d.powi(m),
            Term::XPow(j, m) => x[j].powi(m),
            Term::DX(j) => d * x[j],
            Term::XX(i, j) => x[i] * x[j],
        }
    }

    /// Analytic ∂/∂d of the raw term.
    #[inline]
    pub fn eval_deriv(&self, d: f64, x: &ArrayView1<f64>) -> f64 {
        match *self {
            Term::D => 1.0,
            Term::DPow(m) => f64::from(m) * d.powi(m - 1),
            Term::DX(j) => x[j],
            Term::X(_) | Term::XPow(..) | Term::XX(..) => 0.0,
        }
    }

    /// Whether the term involves the treatment coordinate at all.
    pub fn involves_treatment(&self) -> bool {
        matches!(self, Term::D | Term::DPow(_) | Term::DX(_))
    }
}

fn term_list(spec: &BasisSpec, k: usize) -> Vec<Term> {
    let mut terms = Vec::with_capacity(spec.dim(k));
    match spec.kind {
        BasisKind::Interactions => {
            terms.push(Term::D);
            for j in 0..k {
                terms.push(Term::X(j));
            }
            if spec.degree >= 2 {
                terms.push(Term::DPow(2));
                for j in 0..k {
                    terms.push(Term::XPow(j, 2));
                }
                for j in 0..k {
                    terms.push(Term::DX(j));
                }
                for i in 0..k {
                    for j in i + 1..k {
                        terms.push(Term::XX(i, j));
                    }
                }
            }
        }
        BasisKind::Powers => {
            for m in 1..=spec.degree as i32 {
                if m == 1 {
                    terms.push(Term::D);
                    for j in 0..k {
                        terms.push(Term::X(j));
                    }
                } else {
                    terms.push(Term::DPow(m));
                    for j in 0..k {
                        terms.push(Term::XPow(j, m));
                    }
                }
            }
        }
    }
    terms
}

/// Everything needed to re-evaluate dictionary columns at new points: the
/// spec, the term list, and the standardization constants frozen at fit time.
#[derive(Debug, Clone)]
pub struct BasisContext {
    pub spec: BasisSpec,
    pub n_covariates: usize,
    pub terms: Vec<Term>,
    /// Per-column centers (zero when standardize = false).
    pub center: Array1<f64>,
    /// Per-column scales (one when standardize = false).
    pub scale: Array1<f64>,
}

impl BasisContext {
    pub fn p(&self) -> usize {
        self.terms.len()
    }

    /// Standardized value of column `j` at an arbitrary point. Raw basis
    /// values are recomputed and the stored constants applied, which stays
    /// correct for nonlinear terms under treatment shifts.
    #[inline]
    pub fn eval_column(&self, j: usize, d: f64, x: &ArrayView1<f64>) -> f64 {
        (self.terms[j].eval(d, x) - self.center[j]) / self.scale[j]
    }

    /// Standardized ∂/∂d of column `j` at an arbitrary point.
    #[inline]
    pub fn eval_column_deriv(&self, j: usize, d: f64, x: &ArrayView1<f64>) -> f64 {
        self.terms[j].eval_deriv(d, x) / self.scale[j]
    }

    /// Linear index `intercept + Σ coef_k · b_k(d, x)` over a sparse
    /// coefficient list in standardized column scale.
    pub fn linear_index(
        &self,
        intercept: f64,
        coef: &[(usize, f64)],
        d: f64,
        x: &ArrayView1<f64>,
    ) -> f64 {
        let mut z = intercept;
        for &(j, c) in coef {
            z += c * self.eval_column(j, d, x);
        }
        z
    }

    /// ∂/∂d of the linear index over a sparse coefficient list.
    pub fn linear_index_deriv(&self, coef: &[(usize, f64)], d: f64, x: &ArrayView1<f64>) -> f64 {
        let mut z = 0.0;
        for &(j, c) in coef {
            z += c * self.eval_column_deriv(j, d, x);
        }
        z
    }

    pub fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if data.n_covariates() != self.n_covariates {
            return Err(OasdError::SpecMismatch(format!(
                "basis was built with K = {}, data has K = {}",
                self.n_covariates,
                data.n_covariates()
            )));
        }
        Ok(())
    }
}

/// Dictionary evaluated over a dataset: columns, analytic treatment
/// derivatives, and the standardization context.
#[derive(Debug, Clone)]
pub struct BasisExpansion {
    pub context: BasisContext,
    /// `n × p` standardized columns b_k(D_i, X_i).
    pub columns: Array2<f64>,
    /// `n × p` standardized ∂_d b_k(D_i, X_i).
    pub deriv_columns: Array2<f64>,
    /// Per-column n⁻¹ Σ_i b_k², cached for loadings and solver curvature.
    pub col_sq_mean: Array1<f64>,
}

impl BasisExpansion {
    pub fn n(&self) -> usize {
        self.columns.nrows()
    }

    pub fn p(&self) -> usize {
        self.columns.ncols()
    }

    /// Re-evaluates all columns at treatment `D_i + shift`, applying the
    /// stored standardization constants.
    pub fn eval_at_shifted_treatment(&self, data: &Dataset, shift: f64) -> Result<Array2<f64>> {
        self.context.check_compatible(data)?;
        if !shift.is_finite() {
            return Err(OasdError::Config("shift must be finite".into()));
        }
        let n = data.n();
        let p = self.p();
        let mut out = Array2::zeros((n, p));
        for i in 0..n {
            let d = data.d[i] + shift;
            let x = data.x.row(i);
            for j in 0..p {
                out[[i, j]] = self.context.eval_column(j, d, &x);
            }
        }
        Ok(out)
    }
}

/// Builds the dictionary over the dataset. Columns are centered and scaled
/// to unit sample standard deviation when the spec asks for it, with the
/// constants stored for later point evaluation.
pub fn build_basis(data: &Dataset, spec: &BasisSpec) -> Result<BasisExpansion> {
    if !spec.include_treatment {
        return Err(OasdError::Config(
            "the dictionary must include the treatment".into(),
        ));
    }
    // re-validate degree in case the spec was built by hand
    match spec.kind {
        BasisKind::Interactions if !(1..=2).contains(&spec.degree) => {
            return Err(OasdError::Config(format!(
                "interaction basis supports degree 1 or 2, got {}",
                spec.degree
            )));
        }
        BasisKind::Powers if !(1..=3).contains(&spec.degree) => {
            return Err(OasdError::Config(format!(
                "power basis supports degree 1..=3, got {}",
                spec.degree
            )));
        }
        _ => {}
    }
    let n = data.n();
    let k = data.n_covariates();
    let terms = term_list(spec, k);
    let p = terms.len();

    let mut raw = Array2::zeros((n, p));
    let mut raw_deriv = Array2::zeros((n, p));
    for i in 0..n {
        let d = data.d[i];
        let x = data.x.row(i);
        for (j, t) in terms.iter().enumerate() {
            raw[[i, j]] = t.eval(d, &x);
            raw_deriv[[i, j]] = t.eval_deriv(d, &x);
        }
    }

    let mut center = Array1::zeros(p);
    let mut scale = Array1::ones(p);
    if spec.standardize {
        for j in 0..p {
            let col = raw.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            center[j] = mean;
            let sd = var.sqrt();
            // constant columns keep unit scale; the loading floor downstream
            // handles them
            if sd > 1e-12 {
                scale[j] = sd;
            }
        }
        for j in 0..p {
            let c = center[j];
            let s = scale[j];
            for i in 0..n {
                raw[[i, j]] = (raw[[i, j]] - c) / s;
                raw_deriv[[i, j]] /= s;
            }
        }
    }

    let col_sq_mean = Array1::from_iter(
        (0..p).map(|j| raw.column(j).iter().map(|v| v * v).sum::<f64>() / n as f64),
    );

    Ok(BasisExpansion {
        context: BasisContext {
            spec: *spec,
            n_covariates: k,
            terms,
            center,
            scale,
        },
        columns: raw,
        deriv_columns: raw_deriv,
        col_sq_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn toy_data(k: usize, n: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y = Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)));
        let d = Array1::from_iter((0..n).map(|_| rng.random_range(-2.0..2.0)));
        let x = Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0));
        Dataset::new(y, d, x).unwrap()
    }

    #[test]
    fn degree2_dimension_matches_formula() {
        let spec = BasisSpec::interactions(2).unwrap();
        assert_eq!(spec.dim(30), 527);
        assert_eq!(spec.dim(1), 5);
        let data = toy_data(30, 40, 1);
        let b = build_basis(&data, &spec).unwrap();
        assert_eq!(b.p(), 527);
    }

    #[test]
    fn k1_degree2_column_order() {
        let spec = BasisSpec::interactions(2).unwrap().with_standardize(false);
        let y = arr1(&[0.0, 0.0]);
        let d = arr1(&[1.0, 2.0]);
        let x = Array2::from_shape_vec((2, 1), vec![2.0, 3.0]).unwrap();
        let data = Dataset::new(y, d, x).unwrap();
        let b = build_basis(&data, &spec).unwrap();
        // row 0: (d, x, d², x², dx) = (1, 2, 1, 4, 2)
        let row: Vec<f64> = b.columns.row(0).to_vec();
        assert_eq!(row, vec![1.0, 2.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn derivative_of_d_squared() {
        let spec = BasisSpec::interactions(2).unwrap().with_standardize(false);
        let y = arr1(&[0.0, 0.0]);
        let d = arr1(&[3.0, 1.0]);
        let x = Array2::from_shape_vec((2, 1), vec![0.5, 0.5]).unwrap();
        let data = Dataset::new(y, d, x).unwrap();
        let b = build_basis(&data, &spec).unwrap();
        // columns: d, x, d², x², dx; derivative row at d = 3: (1, 0, 6, 0, 0.5)
        let row: Vec<f64> = b.deriv_columns.row(0).to_vec();
        assert_eq!(row, vec![1.0, 0.0, 6.0, 0.0, 0.5]);
    }

    #[test]
    fn deriv_zero_for_non_treatment_terms() {
        let spec = BasisSpec::interactions(2).unwrap();
        let data = toy_data(3, 25, 2);
        let b = build_basis(&data, &spec).unwrap();
        for (j, t) in b.context.terms.iter().enumerate() {
            if !t.involves_treatment() {
                for i in 0..b.n() {
                    assert_eq!(b.deriv_columns[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn shift_zero_is_identity() {
        let spec = BasisSpec::interactions(2).unwrap();
        let data = toy_data(4, 30, 3);
        let b = build_basis(&data, &spec).unwrap();
        let shifted = b.eval_at_shifted_treatment(&data, 0.0).unwrap();
        assert_eq!(shifted, b.columns);
    }

    #[test]
    fn shifted_row_before_standardization() {
        let spec = BasisSpec::interactions(2).unwrap().with_standardize(false);
        let y = arr1(&[0.0, 0.0]);
        let d = arr1(&[1.0, -1.0]);
        let x = Array2::from_shape_vec((2, 1), vec![2.0, 1.0]).unwrap();
        let data = Dataset::new(y, d, x).unwrap();
        let b = build_basis(&data, &spec).unwrap();
        let shifted = b.eval_at_shifted_treatment(&data, 0.5).unwrap();
        // b(1.5, 2) = (1.5, 2, 2.25, 4, 3)
        let row: Vec<f64> = shifted.row(0).to_vec();
        assert_eq!(row, vec![1.5, 2.0, 2.25, 4.0, 3.0]);
    }

    #[test]
    fn plus_minus_shift_differ_by_2h_in_d_column() {
        let spec = BasisSpec::interactions(1).unwrap().with_standardize(false);
        let data = toy_data(2, 10, 4);
        let b = build_basis(&data, &spec).unwrap();
        let h = 0.37;
        let up = b.eval_at_shifted_treatment(&data, h).unwrap();
        let dn = b.eval_at_shifted_treatment(&data, -h).unwrap();
        for i in 0..data.n() {
            assert!((up[[i, 0]] - dn[[i, 0]] - 2.0 * h).abs() < 1e-12);
            // covariate columns unaffected
            assert_eq!(up[[i, 1]], dn[[i, 1]]);
        }
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let spec = BasisSpec::interactions(2).unwrap();
        let data = toy_data(5, 40, 5);
        let a = build_basis(&data, &spec).unwrap();
        let b = build_basis(&data, &spec).unwrap();
        assert_eq!(a.columns, b.columns);
        assert_eq!(a.deriv_columns, b.deriv_columns);
        assert_eq!(a.context.center, b.context.center);
    }

    #[test]
    fn rejects_unsupported_degree() {
        assert!(BasisSpec::interactions(3).is_err());
        assert!(BasisSpec::interactions(0).is_err());
        assert!(BasisSpec::powers(4).is_err());
    }

    #[test]
    fn powers_layout_matches_paper_listing() {
        let spec = BasisSpec::powers(3).unwrap();
        assert_eq!(spec.dim(99), 300);
        let data = toy_data(2, 12, 6);
        let b = build_basis(&data, &spec).unwrap();
        let t = &b.context.terms;
        assert_eq!(t[0], Term::D);
        assert_eq!(t[1], Term::X(0));
        assert_eq!(t[2], Term::X(1));
        assert_eq!(t[3], Term::DPow(2));
        assert_eq!(t[6], Term::DPow(3));
        assert_eq!(t[8], Term::XPow(1, 3));
    }

    // Central finite differences agree with the analytic derivative columns
    // to O(ε²); the only nonzero third derivative in the dictionary is the
    // 6 from d³.
    proptest::proptest! {
        #[test]
        fn finite_difference_matches_deriv(
            dval in -3.0f64..3.0,
            xval in -3.0f64..3.0,
            eps in 1e-4f64..1e-2,
        ) {
            let spec = BasisSpec::powers(3).unwrap().with_standardize(false);
            let y = arr1(&[0.0, 0.0]);
            let d = arr1(&[dval, 0.0]);
            let x = Array2::from_shape_vec((2, 1), vec![xval, 0.0]).unwrap();
            let data = Dataset::new(y, d, x).unwrap();
            let b = build_basis(&data, &spec).unwrap();
            let up = b.eval_at_shifted_treatment(&data, eps).unwrap();
            let dn = b.eval_at_shifted_treatment(&data, -eps).unwrap();
            for j in 0..b.p() {
                let fd = (up[[0, j]] - dn[[0, j]]) / (2.0 * eps);
                let max_third = match b.context.terms[j] {
                    Term::DPow(3) => 6.0,
                    _ => 0.0,
                };
                let tol = 10.0 * eps * eps * max_third + 1e-7;
                proptest::prop_assert!(
                    (fd - b.deriv_columns[[0, j]]).abs() <= tol,
                    "column {}: fd = {}, analytic = {}",
                    j, fd, b.deriv_columns[[0, j]]
                );
            }
        }
    }
}
