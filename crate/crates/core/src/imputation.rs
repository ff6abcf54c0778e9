//! Conditional-mean imputation and the standardized R² metric.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::covariance::GaussianModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::score_matrix::ScoreMatrix;

pub const DEFAULT_RIDGE: f64 = 1e-2;
pub const CLIP_LIMIT: f64 = 10.0;

pub fn clip_standardized(v: f64) -> f64 {
    v.clamp(-CLIP_LIMIT, CLIP_LIMIT)
}

/// Factored `Sigma_CC + ridge I` for one conditioning set.
pub struct Conditioner<'a> {
    model: &'a GaussianModel,
    cond: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> Conditioner<'a> {
    pub fn new(model: &'a GaussianModel, cond: Vec<usize>, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be >= 0".into()));
        }
        if let Some(&j) = cond.iter().find(|&&j| j >= model.dim()) {
            return Err(Error::InvalidArgument(format!("column {j} out of range")));
        }
        let chol = if cond.is_empty() {
            None
        } else {
            let k = cond.len();
            let block = linalg::principal(model.cov(), &cond) + DMatrix::identity(k, k) * ridge;
            Some(linalg::cholesky(block).ok_or_else(|| {
                Error::Singular(format!("conditioning block on columns {cond:?} with ridge {ridge:e}"))
            })?)
        };
        Ok(Self { model, cond, chol })
    }

    pub fn condition(&self) -> &[usize] {
        &self.cond
    }

    /// Conditional variance of each target; independent of observed values.
    pub fn cond_var(&self, targets: &[usize]) -> Vec<f64> {
        let s = self.model.cov();
        match &self.chol {
            None => targets.iter().map(|&j| s[(j, j)]).collect(),
            Some(chol) => {
                let s_ct = linalg::block(s, &self.cond, targets);
                let solved = chol.solve(&s_ct);
                (0..targets.len())
                    .map(|t| s[(targets[t], targets[t])] - s_ct.column(t).dot(&solved.column(t)))
                    .collect()
            }
        }
    }

    /// Conditional means of `targets` given `values` on the conditioning set.
    pub fn predict(&self, values: &[f64], targets: &[usize]) -> Vec<f64> {
        let mu = self.model.mean();
        let Some(chol) = &self.chol else {
            return targets.iter().map(|&j| mu[j]).collect();
        };
        let resid = DVector::from_iterator(self.cond.len(), self.cond.iter().zip(values).map(|(&c, v)| v - mu[c]));
        let x = chol.solve(&resid);
        let s = self.model.cov();
        targets
            .iter()
            .map(|&j| {
                mu[j]
                    + self
                        .cond
                        .iter()
                        .zip(x.iter())
                        .map(|(&c, xc)| s[(j, c)] * xc)
                        .sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowImputation {
    /// `(column, prediction)` per requested target.
    pub predicted: Vec<(usize, f64)>,
    pub cond_var: Vec<(usize, f64)>,
    /// Selected columns observed in the row, ascending.
    pub used_condition: Vec<usize>,
}

/// Predicts `targets` from the selected entries that are observed in `obs`.
/// An empty conditioning set yields the marginal means.
pub fn impute_row(
    obs: &[Option<f64>],
    selected: &[usize],
    targets: &[usize],
    model: &GaussianModel,
    ridge: f64,
) -> Result<RowImputation> {
    if obs.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: obs.len(),
        });
    }
    if let Some(&j) = selected.iter().chain(targets).find(|&&j| j >= model.dim()) {
        return Err(Error::InvalidArgument(format!("column {j} out of range")));
    }
    let mut cond: Vec<usize> = selected.iter().copied().filter(|&j| obs[j].is_some()).collect();
    cond.sort_unstable();
    cond.dedup();
    let c = Conditioner::new(model, cond, ridge)?;
    let values: Vec<f64> = c.condition().iter().map(|&j| obs[j].unwrap_or(0.0)).collect();
    let pred = c.predict(&values, targets);
    let var = c.cond_var(targets);
    Ok(RowImputation {
        predicted: targets.iter().copied().zip(pred).collect(),
        cond_var: targets.iter().copied().zip(var).collect(),
        used_condition: c.condition().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// Observed cells outside the selected set; the evaluation targets.
    ObservedUnselected,
    /// Every cell outside the selected set.
    AllUnselected,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImputationResult {
    pub predicted: BTreeMap<(usize, usize), f64>,
    pub cond_var: BTreeMap<(usize, usize), f64>,
    pub used_condition: Vec<Vec<usize>>,
}

/// Imputes every row of `m`, sharing factorizations between rows with the
/// same conditioning set.
pub fn impute_matrix(
    m: &ScoreMatrix,
    selected: &[usize],
    model: &GaussianModel,
    ridge: f64,
    targets: Targets,
) -> Result<ImputationResult> {
    let n = m.n_benchmarks();
    if model.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: model.dim(),
        });
    }
    let mut is_selected = vec![false; n];
    for &j in selected {
        if j >= n {
            return Err(Error::InvalidArgument(format!("column {j} out of range")));
        }
        is_selected[j] = true;
    }
    let mut cache: BTreeMap<Vec<usize>, Conditioner> = BTreeMap::new();
    let mut out = ImputationResult::default();
    for i in 0..m.n_models() {
        let cond: Vec<usize> = (0..n).filter(|&j| is_selected[j] && m.is_observed(i, j)).collect();
        let cols: Vec<usize> = (0..n)
            .filter(|&j| !is_selected[j] && (targets == Targets::AllUnselected || m.is_observed(i, j)))
            .collect();
        if !cache.contains_key(&cond) {
            cache.insert(cond.clone(), Conditioner::new(model, cond.clone(), ridge)?);
        }
        let c = &cache[&cond];
        let values: Vec<f64> = cond.iter().map(|&j| m.get(i, j).unwrap_or(0.0)).collect();
        for ((&j, p), v) in cols.iter().zip(c.predict(&values, &cols)).zip(c.cond_var(&cols)) {
            out.predicted.insert((i, j), p);
            out.cond_var.insert((i, j), v);
        }
        out.used_condition.push(cond);
    }
    Ok(out)
}

/// `1 - SSE / sum(target^2)`: the baseline is the zero prediction, i.e. the
/// training mean. `None` when every target is zero.
pub fn r2_standardized(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("R² of an empty set".into()));
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    let sst: f64 = target.iter().map(|t| t * t).sum();
    Ok((sst > 0.0).then(|| 1.0 - sse / sst))
}

/// Pooled and per-column R² of predictions against clipped standardized truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Summary {
    pub pooled: Option<f64>,
    pub per_column: BTreeMap<usize, Option<f64>>,
    pub cells: usize,
}

pub fn r2_summary(
    predicted: &BTreeMap<(usize, usize), f64>,
    truth: &BTreeMap<(usize, usize), f64>,
) -> Result<Option<R2Summary>> {
    if predicted.is_empty() {
        return Ok(None);
    }
    let mut pred = Vec::with_capacity(predicted.len());
    let mut tgt = Vec::with_capacity(predicted.len());
    let mut by_col: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (key, &p) in predicted {
        let t = clip_standardized(
            *truth
                .get(key)
                .ok_or_else(|| Error::MissingData(format!("no target for cell {key:?}")))?,
        );
        pred.push(p);
        tgt.push(t);
        let e = by_col.entry(key.1).or_default();
        e.0.push(p);
        e.1.push(t);
    }
    let per_column = by_col
        .into_iter()
        .map(|(j, (p, t))| r2_standardized(&p, &t).map(|r| (j, r)))
        .collect::<Result<_>>()?;
    Ok(Some(R2Summary {
        pooled: r2_standardized(&pred, &tgt)?,
        per_column,
        cells: pred.len(),
    }))
}
