//! Estimation of outcome-conditioned average structural derivatives (OASD)
//! with high-dimensional controls.
//!
//! The pipeline estimates, for outcome intervals `u = (y1, y2)`, the average
//! marginal effect of a continuous treatment on the subpopulation whose
//! outcome falls in `u`. It combines:
//!
//! * penalized logistic distribution regression of `1{Y <= y}` on a
//!   polynomial dictionary of (treatment, covariates), with data-driven
//!   penalty level and iterated penalty loadings plus a post-selection refit
//!   ([`lasso_logit`]);
//! * Riemann integration of the fitted conditional CDF over `u` and a
//!   high-order central partial-difference estimate of its treatment
//!   derivative ([`cdf_tools`]);
//! * an automatic (density-free) fit of the log-density derivative
//!   `L(d,x) = ∂_d f(d,x) / f(d,x)` by penalized minimum distance
//!   ([`riesz`]);
//! * the orthogonal-score estimator and its naive (uncorrected) counterpart
//!   ([`estimator`]);
//! * multiplier-bootstrap pointwise and uniform confidence bands and a
//!   treatment-homogeneity test ([`inference`]);
//! * a Monte Carlo harness with ground-truth oracles ([`simulation`]).
//!
//! The `oasd` binary exposes `estimate`, `simulate` and `compare-derivative`
//! subcommands over these pieces; see [`cli`].

pub mod basis;
pub mod cdf_tools;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod lasso_logit;
pub(crate) mod linalg;
pub mod math;
pub mod riesz;
pub mod simulation;

pub use basis::{build_basis, BasisExpansion, BasisKind, BasisSpec};
pub use cdf_tools::{indicator_integral, solve_eta, DiffScheme, GridInterp, IntervalU};
pub use dataset::Dataset;
pub use error::{OasdError, Result};
pub use estimator::{EstimatorKind, NuisanceBundle, OasdEstimate, ScoreComputer};
pub use inference::{BootstrapResult, WeightLaw};
pub use lasso_logit::{fit_distribution_regression, penalty_level, DistRegFit};
pub use riesz::RieszFit;
