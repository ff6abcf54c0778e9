//! Informative benchmark subset selection under a multivariate Gaussian model.
//!
//! A model-by-benchmark score matrix (possibly incomplete) is summarized by a
//! mean vector and covariance. Greedy submodular maximization of the entropy
//! or the mutual information of the selected block picks a small subset of
//! benchmarks, and the remaining scores are predicted with Gaussian
//! conditional expectations.
//!
//! Modules:
//! - [`score_matrix`]: ingestion, standardization and the logit transform.
//! - [`covariance`]: closed-form, pairwise and EM estimation of `(mu, Sigma)`.
//! - [`selection`]: greedy entropy (pivoted Cholesky), greedy MI, lazy and
//!   budgeted variants, random baseline, spectral diagnostics.
//! - [`imputation`]: conditional-mean imputation and standardized R².
//! - [`evaluation`]: the K-fold cross-validation protocol and method comparison.
//! - [`diagnostics`]: Shapiro-Wilk, Mardia, Benjamini-Hochberg.
//! - [`cli`]: the `benchsel` command-line front end.

// `!(x > 0.0)` deliberately treats NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod covariance;
pub mod diagnostics;
mod error;
pub mod evaluation;
pub mod imputation;
pub(crate) mod linalg;
pub mod score_matrix;
pub mod seeding;
pub mod selection;

pub use covariance::{em_fit, EmConfig, Estimator, GaussianModel};
pub use error::{Error, ErrorKind, Result};
pub use score_matrix::{ColumnStats, LogitParams, ScoreMatrix};
pub use selection::{Objective, SelectionResult};
