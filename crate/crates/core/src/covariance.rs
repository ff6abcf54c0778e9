//! Estimating `(mu, Sigma)` from complete or incomplete score matrices.
//!
//! Two denominators coexist on purpose: the closed-form estimate divides by
//! `M - 1`, while the EM M-step divides by `M`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::score_matrix::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Full,
    Pairwise,
    Em,
}

/// Mean and covariance over benchmarks, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDocument", try_from = "ModelDocument")]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    estimator: Estimator,
    em_iterations: usize,
    converged: bool,
    loglik_trace: Vec<f64>,
    clamped: Vec<bool>,
}

impl GaussianModel {
    /// Symmetrizes `cov` on construction.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, estimator: Estimator) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: cov.nrows().max(cov.ncols()),
            });
        }
        Ok(Self {
            mean,
            cov: linalg::symmetrize(&cov),
            estimator,
            em_iterations: 0,
            converged: true,
            loglik_trace: Vec::new(),
            clamped: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    pub fn em_iterations(&self) -> usize {
        self.em_iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Observed-data log-likelihood at the parameters entering each EM
    /// iteration, followed by the value at the final parameters.
    pub fn loglik_trace(&self) -> &[f64] {
        &self.loglik_trace
    }

    /// `clamped()[t]` is true when the PSD projection after iteration `t + 1`
    /// moved at least one eigenvalue.
    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    mean: Vec<f64>,
    /// Row-major `dim x dim`.
    covariance: Vec<f64>,
    estimator: Estimator,
    iterations: usize,
    converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    loglik_trace: Vec<f64>,
}

impl From<GaussianModel> for ModelDocument {
    fn from(m: GaussianModel) -> Self {
        let n = m.dim();
        let covariance = (0..n * n).map(|k| m.cov[(k / n, k % n)]).collect();
        Self {
            mean: m.mean.iter().copied().collect(),
            covariance,
            estimator: m.estimator,
            iterations: m.em_iterations,
            converged: m.converged,
            loglik_trace: m.loglik_trace,
        }
    }
}

impl TryFrom<ModelDocument> for GaussianModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let n = doc.mean.len();
        if doc.covariance.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: doc.covariance.len(),
            });
        }
        let cov = DMatrix::from_row_slice(n, n, &doc.covariance);
        let mut model = GaussianModel::new(DVector::from_vec(doc.mean), cov, doc.estimator)?;
        model.em_iterations = doc.iterations;
        model.converged = doc.converged;
        model.loglik_trace = doc.loglik_trace;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shrink {
    /// Shrink toward the identity when there are fewer models than benchmarks.
    Auto,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when `||Sigma_new - Sigma||_F / ||Sigma||_F` falls below this.
    pub rel_tol: f64,
    /// Added to a singular observed block before refactorizing.
    pub ridge: f64,
    /// Eigenvalue floor of the PSD projection.
    pub psd_floor: f64,
    pub shrink: Shrink,
}

pub const SPARSE_PSD_FLOOR: f64 = 1e-3;
pub const DENSE_PSD_FLOOR: f64 = 1e-10;
/// Observed fraction below which a matrix counts as highly sparse.
pub const SPARSE_OBSERVED_FRACTION: f64 = 0.5;

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-6,
            ridge: 1e-8,
            psd_floor: DENSE_PSD_FLOOR,
            shrink: Shrink::Auto,
        }
    }
}

impl EmConfig {
    /// Defaults, with the larger eigenvalue floor for rank-deficient or
    /// highly sparse inputs.
    pub fn for_matrix(m: &ScoreMatrix) -> Self {
        let sparse = m.n_models() < m.n_benchmarks() || m.observed_fraction() < SPARSE_OBSERVED_FRACTION;
        Self {
            psd_floor: if sparse { SPARSE_PSD_FLOOR } else { DENSE_PSD_FLOOR },
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be > 0".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be >= 0".into()));
        }
        if !(self.psd_floor > 0.0) {
            return Err(Error::InvalidArgument("psd_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Column means and the `1/(M-1)` sample covariance of a complete matrix.
pub fn estimate_full(m: &ScoreMatrix) -> Result<GaussianModel> {
    if m.n_models() < 2 {
        return Err(Error::InvalidArgument("need at least two models".into()));
    }
    let b = m.to_dense()?;
    let rows = b.nrows() as f64;
    let mean = DVector::from_fn(b.ncols(), |j, _| b.column(j).sum() / rows);
    let mut centered = b;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (rows - 1.0);
    GaussianModel::new(mean, cov, Estimator::Full)
}

/// Per-column mean over observed cells.
pub fn mean_missing(m: &ScoreMatrix) -> Result<Vec<f64>> {
    (0..m.n_benchmarks())
        .map(|j| {
            let col = m.column_observed(j);
            if col.is_empty() {
                return Err(Error::SparseColumn {
                    column: m.benchmark_names()[j].clone(),
                    observed: 0,
                    required: 1,
                });
            }
            Ok(col.iter().sum::<f64>() / col.len() as f64)
        })
        .collect()
}

/// Pairwise-complete covariance. Each entry averages over the models that
/// observe both benchmarks, with the denominator floored at 1. The result
/// need not be positive semidefinite.
pub fn pairwise_cov(m: &ScoreMatrix, mu: &[f64]) -> Result<DMatrix<f64>> {
    let n = m.n_benchmarks();
    if mu.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: mu.len(),
        });
    }
    let mut num = DMatrix::<f64>::zeros(n, n);
    let mut count = DMatrix::<f64>::zeros(n, n);
    let mut centered = vec![0.0; n];
    let mut observed = vec![false; n];
    for i in 0..m.n_models() {
        for j in 0..n {
            match m.get(i, j) {
                Some(v) => {
                    centered[j] = v - mu[j];
                    observed[j] = true;
                }
                None => observed[j] = false,
            }
        }
        for j in 0..n {
            if !observed[j] {
                continue;
            }
            for k in j..n {
                if observed[k] {
                    num[(j, k)] += centered[j] * centered[k];
                    count[(j, k)] += 1.0;
                }
            }
        }
    }
    let mut s = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for k in j..n {
            let v = num[(j, k)] / (count[(j, k)] - 1.0).max(1.0);
            s[(j, k)] = v;
            s[(k, j)] = v;
        }
    }
    Ok(s)
}

/// Clamps the eigenvalues of a symmetric matrix to at least `floor`.
pub fn psd_project(s: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    psd_project_counted(s, floor).map(|(p, _)| p)
}

/// Like [`psd_project`], also returning how many eigenvalues were raised.
/// When none are, the symmetrized input is returned as is.
pub fn psd_project_counted(s: &DMatrix<f64>, floor: f64) -> Result<(DMatrix<f64>, usize)> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            actual: s.ncols(),
        });
    }
    let asym = linalg::max_asymmetry(s);
    if asym > 1e-8 * linalg::max_abs(s).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = linalg::symmetrize(s);
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    let clamped = eig.eigenvalues.iter().filter(|&&l| l < floor).count();
    if clamped == 0 {
        return Ok((sym, 0));
    }
    let lambda = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&lambda) * v.transpose();
    Ok((linalg::symmetrize(&rebuilt), clamped))
}

/// Deterministic intensity `(N - M) / N` clamped to `[0, 1]`.
pub fn shrinkage_intensity(n_models: usize, n_benchmarks: usize) -> f64 {
    if n_benchmarks == 0 {
        return 0.0;
    }
    ((n_benchmarks as f64 - n_models as f64) / n_benchmarks as f64).clamp(0.0, 1.0)
}

/// `(1 - a) S + a (tr S / N) I` with `a = (N - M) / N`; the trace is preserved.
pub fn shrink_identity(s: &DMatrix<f64>, n_models: usize, n_benchmarks: usize) -> DMatrix<f64> {
    let alpha = shrinkage_intensity(n_models, n_benchmarks);
    if alpha == 0.0 {
        return s.clone();
    }
    let n = s.nrows();
    let target = s.trace() / n as f64;
    let mut out = s * (1.0 - alpha);
    for j in 0..n {
        out[(j, j)] += alpha * target;
    }
    out
}

/// `D^{-1/2} S D^{-1/2}` with `D = diag(S)`; the diagonal is set to exactly 1.
pub fn to_correlation(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let d: Vec<f64> = (0..n).map(|j| s[(j, j)]).collect();
    if let Some(j) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NotPsd(d[j]));
    }
    let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            1.0
        } else {
            s[(a, b)] * inv_sqrt[a] * inv_sqrt[b]
        }
    }))
}

/// Conditional moments of the missing block given the observed block, shared
/// by every row with the same observation pattern.
struct PatternMoments {
    observed: Vec<usize>,
    missing: Vec<usize>,
    /// `Sigma_OO^{-1} Sigma_OM`, `|O| x |M|`.
    coef: DMatrix<f64>,
    /// Conditional covariance of the missing block.
    cond_cov: DMatrix<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    logdet: f64,
}

fn pattern_moments(cov: &DMatrix<f64>, pattern: &[bool], ridge: f64, row_name: &str) -> Result<PatternMoments> {
    let observed: Vec<usize> = (0..pattern.len()).filter(|&j| pattern[j]).collect();
    let missing: Vec<usize> = (0..pattern.len()).filter(|&j| !pattern[j]).collect();
    if observed.is_empty() {
        return Ok(PatternMoments {
            coef: DMatrix::zeros(0, missing.len()),
            cond_cov: linalg::principal(cov, &missing),
            observed,
            missing,
            chol: None,
            logdet: 0.0,
        });
    }
    let s_oo = linalg::principal(cov, &observed);
    let chol = match linalg::cholesky(s_oo.clone()) {
        Some(c) => c,
        None => {
            let k = s_oo.nrows();
            linalg::cholesky(s_oo + DMatrix::identity(k, k) * ridge).ok_or_else(|| {
                Error::Singular(format!(
                    "observed covariance block of row {row_name:?} is singular after ridge {ridge:e}"
                ))
            })?
        }
    };
    let s_om = linalg::block(cov, &observed, &missing);
    let coef = chol.solve(&s_om);
    let s_mm = linalg::principal(cov, &missing);
    let cond_cov = linalg::symmetrize(&(s_mm - s_om.transpose() * &coef));
    let logdet = linalg::chol_logdet(&chol);
    Ok(PatternMoments {
        observed,
        missing,
        coef,
        cond_cov,
        chol: Some(chol),
        logdet,
    })
}

fn group_patterns(m: &ScoreMatrix) -> BTreeMap<Vec<bool>, Vec<usize>> {
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for i in 0..m.n_models() {
        let key = (0..m.n_benchmarks()).map(|j| m.is_observed(i, j)).collect();
        groups.entry(key).or_default().push(i);
    }
    groups
}

struct EStep {
    completed: DMatrix<f64>,
    cond_cov_sum: DMatrix<f64>,
    loglik: f64,
}

/// Fills every missing cell with its conditional mean and accumulates the
/// conditional covariances and the observed-data log-likelihood.
fn e_step(
    m: &ScoreMatrix,
    groups: &BTreeMap<Vec<bool>, Vec<usize>>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    ridge: f64,
) -> Result<EStep> {
    let n = m.n_benchmarks();
    let entries: Vec<(&Vec<bool>, &Vec<usize>)> = groups.iter().collect();
    let moments: Vec<PatternMoments> = entries
        .par_iter()
        .map(|(pattern, rows)| pattern_moments(cov, pattern, ridge, &m.model_names()[rows[0]]))
        .collect::<Result<_>>()?;

    let mut completed = DMatrix::<f64>::zeros(m.n_models(), n);
    let mut cond_cov_sum = DMatrix::<f64>::zeros(n, n);
    let mut loglik = 0.0;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for ((_, rows), pm) in entries.iter().zip(&moments) {
        for &i in rows.iter() {
            let resid = DVector::from_iterator(
                pm.observed.len(),
                pm.observed.iter().map(|&j| m.get(i, j).unwrap_or(0.0) - mean[j]),
            );
            for &j in &pm.observed {
                completed[(i, j)] = m.get(i, j).unwrap_or(0.0);
            }
            let fill = pm.coef.tr_mul(&resid);
            for (a, &j) in pm.missing.iter().enumerate() {
                completed[(i, j)] = mean[j] + fill[a];
            }
            if let Some(chol) = &pm.chol {
                let solved = chol.solve(&resid);
                let quad = resid.dot(&solved);
                loglik -= 0.5 * (pm.observed.len() as f64 * ln2pi + pm.logdet + quad);
            }
        }
        let count = rows.len() as f64;
        for (a, &j) in pm.missing.iter().enumerate() {
            for (b, &k) in pm.missing.iter().enumerate() {
                cond_cov_sum[(j, k)] += count * pm.cond_cov[(a, b)];
            }
        }
    }
    Ok(EStep {
        completed,
        cond_cov_sum,
        loglik,
    })
}

fn frobenius(s: &DMatrix<f64>) -> f64 {
    s.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// EM for a Gaussian with entries missing at random.
///
/// Starts from the observed-cell means and the PSD-projected pairwise
/// covariance (shrunk toward the identity when `M < N`), then alternates
/// conditional-moment E-steps with `1/M` M-steps, projecting onto the PSD
/// cone after each one. Running out of iterations is reported through
/// `converged()`, not as an error.
pub fn em_fit(m: &ScoreMatrix, cfg: &EmConfig) -> Result<GaussianModel> {
    cfg.validate()?;
    let (rows, n) = (m.n_models(), m.n_benchmarks());
    let rank_deficient = cfg.shrink == Shrink::Auto && rows < n;

    let mu0 = mean_missing(m)?;
    let mut cov = psd_project(&pairwise_cov(m, &mu0)?, cfg.psd_floor)?;
    if rank_deficient {
        cov = shrink_identity(&cov, rows, n);
    }
    let mut mean = DVector::from_vec(mu0);
    let groups = group_patterns(m);

    let mut loglik_trace = Vec::new();
    let mut clamped = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let step = e_step(m, &groups, &mean, &cov, cfg.ridge)?;
        loglik_trace.push(step.loglik);
        iterations += 1;

        let mf = rows as f64;
        let new_mean = DVector::from_fn(n, |j, _| step.completed.column(j).sum() / mf);
        let mut centered = step.completed;
        for mut row in centered.row_iter_mut() {
            row -= new_mean.transpose();
        }
        let raw = (centered.transpose() * &centered + step.cond_cov_sum) / mf;
        let (new_cov, moved) = psd_project_counted(&linalg::symmetrize(&raw), cfg.psd_floor)?;
        clamped.push(moved > 0);

        let change = frobenius(&(&new_cov - &cov)) / frobenius(&cov).max(f64::MIN_POSITIVE);
        mean = new_mean;
        cov = new_cov;
        if change < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    loglik_trace.push(e_step(m, &groups, &mean, &cov, cfg.ridge)?.loglik);

    if rank_deficient {
        cov = shrink_identity(&cov, rows, n);
    }
    let mut model = GaussianModel::new(mean, cov, Estimator::Em)?;
    model.em_iterations = iterations;
    model.converged = converged;
    model.loglik_trace = loglik_trace;
    model.clamped = clamped;
    Ok(model)
}

/// How `estimate` picks between the closed form and EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorPolicy {
    /// Closed form when fully observed, EM otherwise.
    #[default]
    Auto,
    Full,
    Em,
}

pub fn estimate(m: &ScoreMatrix, policy: EstimatorPolicy, cfg: &EmConfig) -> Result<GaussianModel> {
    match policy {
        EstimatorPolicy::Full => estimate_full(m),
        EstimatorPolicy::Em => em_fit(m, cfg),
        EstimatorPolicy::Auto if m.is_complete() => estimate_full(m),
        EstimatorPolicy::Auto => em_fit(m, cfg),
    }
}

/// Replaces every missing cell by its conditional mean under `model`.
pub fn complete_matrix(m: &ScoreMatrix, model: &GaussianModel, ridge: f64) -> Result<DMatrix<f64>> {
    if model.dim() != m.n_benchmarks() {
        return Err(Error::DimensionMismatch {
            expected: m.n_benchmarks(),
            actual: model.dim(),
        });
    }
    let groups = group_patterns(m);
    Ok(e_step(m, &groups, model.mean(), model.cov(), ridge)?.completed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn dense(rows: usize, cols: usize, v: &[f64]) -> ScoreMatrix {
        ScoreMatrix::from_dense(names("m", rows), names("b", cols), v).unwrap()
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).iter().all(|d| d.abs() <= tol)
    }

    /// Independent symmetric eigensolver (cyclic Jacobi) for oracle checks.
    fn jacobi_eigen(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = s.nrows();
        let mut a = s.clone();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - sn * akq;
                        a[(k, q)] = sn * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - sn * aqk;
                        a[(q, k)] = sn * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - sn * vkq;
                        v[(k, q)] = sn * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[(i, i)]).collect(), v)
    }

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        linalg::symmetrize(&g)
    }

    #[test]
    fn full_estimate_two_by_two() {
        let model = estimate_full(&dense(2, 2, &[1., 0., 0., 1.])).unwrap();
        assert_eq!(model.mean().as_slice(), &[0.5, 0.5]);
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!(close(model.cov(), &expect, 1e-15));
        assert_eq!(model.estimator(), Estimator::Full);
    }

    #[test]
    fn full_estimate_duplicated_rows() {
        // Rows (1,2),(3,1),(2,6): centered sum of squares by hand.
        let base = estimate_full(&dense(3, 2, &[1., 2., 3., 1., 2., 6.])).unwrap();
        let scatter = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 14.0]);
        assert!(close(base.cov(), &(&scatter / 2.0), 1e-12));
        // Each row twice: same centering, doubled scatter, denominator 5.
        let twice = estimate_full(&dense(6, 2, &[1., 2., 3., 1., 2., 6., 1., 2., 3., 1., 2., 6.])).unwrap();
        assert!(close(twice.cov(), &(&scatter * 2.0 / 5.0), 1e-12));
    }

    #[test]
    fn full_estimate_errors() {
        let partial = ScoreMatrix::from_rows(
            names("m", 3),
            names("b", 2),
            vec![vec![Some(1.), None], vec![Some(2.), Some(1.)], vec![Some(0.), Some(3.)]],
        )
        .unwrap();
        assert!(matches!(estimate_full(&partial), Err(Error::MissingData(_))));
    }

    #[test]
    fn mean_missing_examples() {
        let m = ScoreMatrix::from_rows(
            names("m", 3),
            names("b", 2),
            vec![vec![Some(1.), None], vec![Some(3.), Some(4.)], vec![Some(5.), Some(4.)]],
        )
        .unwrap();
        assert_eq!(mean_missing(&m).unwrap(), vec![3.0, 4.0]);
        let full = dense(3, 2, &[1., 2., 3., 1., 2., 6.]);
        let model = estimate_full(&full).unwrap();
        let mu = mean_missing(&full).unwrap();
        for (j, m) in mu.iter().enumerate() {
            assert!((m - model.mean()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn pairwise_reduces_to_full() {
        let full = dense(4, 3, &[1., 2., 0.5, 3., 1., 0.1, 2., 6., 0.7, 0.5, 0.2, 0.9]);
        let mu = mean_missing(&full).unwrap();
        let pw = pairwise_cov(&full, &mu).unwrap();
        assert!(close(&pw, estimate_full(&full).unwrap().cov(), 1e-12));
    }

    #[test]
    fn pairwise_disjoint_and_single_overlap() {
        // b0 and b1 are never co-observed; b1 and b2 share exactly one model.
        let m = ScoreMatrix::from_rows(
            names("m", 4),
            names("b", 3),
            vec![
                vec![Some(1.), None, None],
                vec![Some(3.), None, Some(2.)],
                vec![None, Some(5.), Some(4.)],
                vec![None, Some(1.), None],
            ],
        )
        .unwrap();
        let mu = mean_missing(&m).unwrap();
        assert_eq!(mu, vec![2.0, 3.0, 3.0]);
        let pw = pairwise_cov(&m, &mu).unwrap();
        assert_eq!(pw[(0, 1)], 0.0);
        // Only model m2: (5-3)(4-3) = 2, denominator max(1-1, 1) = 1.
        assert_eq!(pw[(1, 2)], 2.0);
    }

    #[test]
    fn psd_project_examples() {
        let pd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(close(&psd_project(&pd, 1e-3).unwrap(), &pd, 1e-10));

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        let p = psd_project(&d, 1e-3).unwrap();
        assert!(close(
            &p,
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-3])),
            1e-12
        ));

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.1, 1.0]);
        assert!(matches!(psd_project(&bad, 1e-3), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn psd_project_matches_jacobi_oracle() {
        for seed in 0..5 {
            let s = random_symmetric(5, seed);
            let floor = 1e-3;
            let projected = psd_project(&s, floor).unwrap();
            let (vals, vecs) = jacobi_eigen(&s);
            let lam = DMatrix::from_diagonal(&DVector::from_iterator(5, vals.iter().map(|&l| l.max(floor))));
            let oracle = &vecs * lam * vecs.transpose();
            assert!(close(&projected, &oracle, 1e-9), "seed {seed}");
            let (after, _) = jacobi_eigen(&projected);
            assert!(after.iter().all(|&l| l >= floor - 1e-10));
            // Idempotent.
            assert!(close(&psd_project(&projected, floor).unwrap(), &projected, 1e-10));
        }
    }

    #[test]
    fn shrinkage_cases() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        assert_eq!(shrink_identity(&s, 5, 2), s);
        let all = shrink_identity(&s, 0, 2);
        assert!(close(&all, &(DMatrix::identity(2, 2) * 1.5), 1e-15));
        let s4 = random_symmetric(4, 3);
        let s4 = &s4 * s4.transpose();
        for m in 0..6 {
            let out = shrink_identity(&s4, m, 4);
            assert!((out.trace() - s4.trace()).abs() < 1e-9);
        }
    }

    #[test]
    fn correlation_cases() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        assert_eq!(to_correlation(&d).unwrap(), DMatrix::identity(2, 2));
        let r = to_correlation(&DMatrix::from_row_slice(2, 2, &[4., 2., 2., 1.])).unwrap();
        assert!(close(&r, &DMatrix::from_element(2, 2, 1.0), 1e-12));
        let g = random_symmetric(4, 9);
        let s = &g * g.transpose() + DMatrix::identity(4, 4) * 0.1;
        let r = to_correlation(&s).unwrap();
        for a in 0..4 {
            assert_eq!(r[(a, a)], 1.0);
            for b in 0..4 {
                if a != b {
                    let direct = s[(a, b)] / (s[(a, a)] * s[(b, b)]).sqrt();
                    assert!((r[(a, b)] - direct).abs() < 1e-12);
                    assert!(r[(a, b)].abs() <= 1.0 + 1e-9);
                }
            }
        }
        assert!(to_correlation(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))).is_err());
    }

    #[test]
    fn em_fully_observed_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rows, cols) = (40, 4);
        let v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = dense(rows, cols, &v);
        let em = em_fit(&m, &EmConfig::default()).unwrap();
        assert!(em.converged() && em.em_iterations() <= 3, "{}", em.em_iterations());
        let full = estimate_full(&m).unwrap();
        let scaled = full.cov() * ((rows as f64 - 1.0) / rows as f64);
        assert!(close(em.cov(), &scaled, 1e-8));
        for j in 0..cols {
            assert!((em.mean()[j] - full.mean()[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn em_single_missing_cell_is_bivariate_conditional() {
        // Complete rows plus one row missing b1; the E-step fill of that cell
        // must equal mu2 + rho sigma2 / sigma1 (x1 - mu1) under the current
        // parameters. Checked at the converged fixed point.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = 30;
        let mut cells = Vec::new();
        for i in 0..rows {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            cells.push(Some(1.0 + z1));
            cells.push(if i == 0 { None } else { Some(2.0 + 0.7 * z1 + 0.5 * z2) });
        }
        let m = ScoreMatrix::new(names("m", rows), names("b", 2), cells).unwrap();
        let model = em_fit(
            &m,
            &EmConfig {
                rel_tol: 1e-12,
                ..EmConfig::default()
            },
        )
        .unwrap();
        let filled = complete_matrix(&m, &model, 0.0).unwrap();
        let (mu, s) = (model.mean(), model.cov());
        let rho = s[(0, 1)] / (s[(0, 0)] * s[(1, 1)]).sqrt();
        let x1 = m.get(0, 0).unwrap();
        let closed = mu[1] + rho * (s[(1, 1)] / s[(0, 0)]).sqrt() * (x1 - mu[0]);
        assert!((filled[(0, 1)] - closed).abs() < 1e-12);
    }

    #[test]
    fn em_loglik_monotone_when_unclamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = 200;
        let mut cells = Vec::new();
        for i in 0..rows {
            let f: f64 = StandardNormal.sample(&mut rng);
            for j in 0..4 {
                let e: f64 = StandardNormal.sample(&mut rng);
                let v = f * (1.0 + j as f64 * 0.3) + 0.5 * e;
                let drop = (i * 7 + j * 3) % 5 == 0 && j != 0;
                cells.push((!drop).then_some(v));
            }
        }
        let m = ScoreMatrix::new(names("m", rows), names("b", 4), cells).unwrap();
        let model = em_fit(&m, &EmConfig::default()).unwrap();
        let trace = model.loglik_trace();
        assert_eq!(trace.len(), model.em_iterations() + 1);
        for t in 0..model.em_iterations() {
            if !model.clamped()[t] {
                assert!(
                    trace[t + 1] >= trace[t] - 1e-8,
                    "step {t}: {} -> {}",
                    trace[t],
                    trace[t + 1]
                );
            }
        }
    }

    #[test]
    fn em_rank_deficient_is_shrunk_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, cols) = (4, 8);
        let cells: Vec<Option<f64>> = (0..rows * cols)
            .map(|k| {
                let v: f64 = StandardNormal.sample(&mut rng);
                (k % 5 != 1 || k % cols == 0).then_some(v)
            })
            .collect();
        let m = ScoreMatrix::new(names("m", rows), names("b", cols), cells).unwrap();
        let cfg = EmConfig::for_matrix(&m);
        assert_eq!(cfg.psd_floor, SPARSE_PSD_FLOOR);
        let model = em_fit(&m, &cfg).unwrap();
        let eig = nalgebra::SymmetricEigen::new(model.cov().clone());
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn model_json_round_trip() {
        let model = estimate_full(&dense(3, 2, &[1., 2., 3., 1., 2., 6.])).unwrap();
        let json = serde_json::to_value(&model).unwrap();
        assert_eq!(json["estimator"], "full");
        assert_eq!(json["covariance"].as_array().unwrap().len(), 4);
        assert_eq!(json["covariance"][1], json["covariance"][2]);
        let back: GaussianModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, model);
    }
}
