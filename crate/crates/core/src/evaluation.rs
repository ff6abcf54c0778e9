//! K-fold cross-validation of selection methods.
//!
//! Models are permuted once and split into balanced folds. For each held-out
//! fold and holdout fraction `p`, a training set is drawn from the remaining
//! models, all statistics are estimated on it, and the validation rows are
//! imputed from their observed selected benchmarks. Metrics live in
//! standardized space.
//!
//! Random streams: `"folds"` for the fold permutation, `("train", fold)` for
//! the training permutation (shared across `p`, so training sets are nested),
//! `("random", p_index, fold)` for the random baseline.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate, EmConfig, EstimatorPolicy, GaussianModel};
use crate::error::{Error, ErrorKind, Result};
use crate::imputation::{clip_standardized, r2_standardized, Conditioner, DEFAULT_RIDGE};
use crate::score_matrix::{
    inverse_logit_value, logit_transform, logit_value, ColumnStats, LogitParams, ScoreMatrix, DEFAULT_LOGIT_EPSILON,
};
use crate::seeding::rng_for;
use crate::selection::{self, SelectionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Entropy,
    Mi,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Entropy => "entropy",
            Method::Mi => "mi",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "entropy" => Ok(Method::Entropy),
            "mi" => Ok(Method::Mi),
            "random" => Ok(Method::Random),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub holdout_fractions: Vec<f64>,
    pub k_max: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub estimator_policy: EstimatorPolicy,
    pub ridge: f64,
    pub logit_mode: bool,
    pub logit_epsilon: f64,
    pub em_max_iter: usize,
    pub em_rel_tol: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            holdout_fractions: vec![0.1, 0.2, 0.5, 0.9],
            k_max: 15,
            methods: vec![Method::Entropy, Method::Mi, Method::Random],
            seed: 0,
            estimator_policy: EstimatorPolicy::Auto,
            ridge: DEFAULT_RIDGE,
            logit_mode: false,
            logit_epsilon: DEFAULT_LOGIT_EPSILON,
            em_max_iter: EmConfig::default().max_iter,
            em_rel_tol: EmConfig::default().rel_tol,
        }
    }
}

impl CvConfig {
    pub fn validate(&self, n_models: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if n_models < self.folds {
            return bad(format!("{} models cannot fill {} folds", n_models, self.folds));
        }
        if self.k_max < 1 {
            return bad("k_max must be >= 1".into());
        }
        if self.holdout_fractions.is_empty() {
            return bad("at least one holdout fraction is required".into());
        }
        if let Some(p) = self.holdout_fractions.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return bad(format!("holdout fractions must lie in (0, 1), got {p}"));
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods must be distinct".into());
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be >= 0".into());
        }
        if self.em_max_iter < 1 || !(self.em_rel_tol > 0.0) {
            return bad("EM needs max_iter >= 1 and rel_tol > 0".into());
        }
        Ok(())
    }
}

/// Balanced folds over a seeded permutation of `0..n_models`; each fold's
/// indices are sorted. The first `n_models % folds` folds get one extra row.
pub fn fold_assignment(n_models: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n_models).collect();
    perm.shuffle(&mut rng_for(seed, "folds", &[]));
    let (base, extra) = (n_models / folds, n_models % folds);
    let mut start = 0;
    (0..folds)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let mut fold = perm[start..start + len].to_vec();
            start += len;
            fold.sort_unstable();
            fold
        })
        .collect()
}

/// Training-set size for holdout fraction `p`: the whole pool when
/// `p <= 1/folds`, otherwise `round_half_even((1 - p) M)` capped at the pool.
pub fn training_size(n_models: usize, folds: usize, pool: usize, p: f64) -> usize {
    if p <= 1.0 / folds as f64 + 1e-12 {
        return pool;
    }
    (((1.0 - p) * n_models as f64).round_ties_even() as usize).min(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub method: Method,
    pub holdout_p: f64,
    pub fold: usize,
    pub k: usize,
    /// Pooled standardized R² over every evaluated cell of the fold.
    pub r2: Option<f64>,
    pub residual_fraction: Option<f64>,
    pub entropy: Option<f64>,
    pub mi: Option<f64>,
    pub n_targets: usize,
    pub per_benchmark_r2: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOrder {
    pub method: Method,
    pub holdout_p: f64,
    pub fold: usize,
    pub benchmarks: Vec<String>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    /// Sample standard deviation; absent with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self {
            mean: Some(mean),
            std,
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub holdout_p: f64,
    pub k: usize,
    pub r2: Stat,
    pub residual_fraction: Stat,
    pub entropy: Stat,
    pub mi: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: CvConfig,
    pub fold_sizes: Vec<usize>,
    pub cells: Vec<CvCell>,
    pub selection_orders: Vec<SelectionOrder>,
    pub summary: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

/// Training-side state for one (fold, p) unit.
struct Prepared {
    cols: Vec<usize>,
    names: Vec<String>,
    /// Statistics of the space the model lives in (logit space in logit mode).
    stats: ColumnStats,
    /// Raw-score statistics used for metrics in logit mode.
    raw_stats: ColumnStats,
    logit: Option<LogitParams>,
    model: GaussianModel,
}

fn prepare(
    m: &ScoreMatrix,
    train: &[usize],
    cfg: &CvConfig,
    warnings: &mut Vec<String>,
    tag: &str,
) -> Result<Option<Prepared>> {
    let mut cols: Vec<usize> = (0..m.n_benchmarks())
        .filter(|&j| train.iter().filter(|&&i| m.is_observed(i, j)).count() >= 2)
        .collect();
    let sparse: Vec<&str> = (0..m.n_benchmarks())
        .filter(|j| !cols.contains(j))
        .map(|j| m.benchmark_names()[j].as_str())
        .collect();
    if !sparse.is_empty() {
        warnings.push(format!(
            "{tag}: excluded benchmarks with fewer than 2 training scores: {sparse:?}"
        ));
    }
    loop {
        if cols.len() < 2 {
            warnings.push(format!("{tag}: fewer than 2 usable benchmarks; skipped"));
            return Ok(None);
        }
        let rows: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| cols.iter().any(|&j| m.is_observed(i, j)))
            .collect();
        if rows.len() < 2 {
            warnings.push(format!("{tag}: fewer than 2 usable training models; skipped"));
            return Ok(None);
        }
        let sub = m.select(&rows, &cols)?;
        match fit_training(&sub, cfg) {
            Ok((stats, raw_stats, logit, model)) => {
                let names = sub.benchmark_names().to_vec();
                return Ok(Some(Prepared {
                    cols,
                    names,
                    stats,
                    raw_stats,
                    logit,
                    model,
                }));
            }
            Err(Error::ZeroVariance { column }) => {
                warnings.push(format!(
                    "{tag}: excluded benchmark {column:?} with zero training variance"
                ));
                let j = m.benchmark_index(&column).expect("column comes from this matrix");
                cols.retain(|&c| c != j);
            }
            Err(e) => return Err(e),
        }
    }
}

fn fit_training(
    sub: &ScoreMatrix,
    cfg: &CvConfig,
) -> Result<(ColumnStats, ColumnStats, Option<LogitParams>, GaussianModel)> {
    let raw_stats = ColumnStats::from_matrix(sub, "training")?;
    let (space, logit) = if cfg.logit_mode {
        let params = LogitParams::from_matrix(sub, cfg.logit_epsilon)?;
        (logit_transform(sub, &params)?, Some(params))
    } else {
        (sub.clone(), None)
    };
    let stats = if logit.is_some() {
        ColumnStats::from_matrix(&space, "training-logit")?
    } else {
        raw_stats.clone()
    };
    let z = crate::score_matrix::standardize(&space, &stats)?;
    let em = EmConfig {
        max_iter: cfg.em_max_iter,
        rel_tol: cfg.em_rel_tol,
        ..EmConfig::for_matrix(&z)
    };
    let model = estimate(&z, cfg.estimator_policy, &em)?;
    Ok((stats, raw_stats, logit, model))
}

struct UnitOutput {
    cells: Vec<CvCell>,
    orders: Vec<SelectionOrder>,
    warnings: Vec<String>,
}

fn select_for(
    method: Method,
    cov: &DMatrix<f64>,
    k: usize,
    seed: u64,
    p_idx: usize,
    fold: usize,
) -> Result<SelectionResult> {
    match method {
        Method::Entropy => selection::greedy_entropy(cov, k),
        Method::Mi => selection::greedy_mi(cov, k),
        Method::Random => {
            let mut rng = rng_for(seed, "random", &[p_idx as u64, fold as u64]);
            let mut r = selection::random_select_with(cov.nrows(), k, &mut rng)?;
            selection::annotate_entropy(cov, &mut r)?;
            Ok(r)
        }
    }
}

fn empty_cell(method: Method, p: f64, fold: usize, k: usize) -> CvCell {
    CvCell {
        method,
        holdout_p: p,
        fold,
        k,
        r2: None,
        residual_fraction: None,
        entropy: None,
        mi: None,
        n_targets: 0,
        per_benchmark_r2: BTreeMap::new(),
    }
}

fn run_unit(
    m: &ScoreMatrix,
    cfg: &CvConfig,
    fold: usize,
    validation: &[usize],
    train: &[usize],
    p_idx: usize,
) -> Result<UnitOutput> {
    let p = cfg.holdout_fractions[p_idx];
    let tag = format!("fold {fold}, p={p}");
    let mut warnings = Vec::new();
    let mut out_cells = Vec::new();
    let mut orders = Vec::new();
    let empty_all = |cells: &mut Vec<CvCell>| {
        for &method in &cfg.methods {
            for k in 1..=cfg.k_max {
                cells.push(empty_cell(method, p, fold, k));
            }
        }
    };

    let prepared = match prepare(m, train, cfg, &mut warnings, &tag) {
        Ok(Some(prep)) => prep,
        Ok(None) => {
            empty_all(&mut out_cells);
            return Ok(UnitOutput {
                cells: out_cells,
                orders,
                warnings,
            });
        }
        Err(e) if e.kind() == ErrorKind::Numerical => {
            warnings.push(format!("{tag}: estimation failed: {e}"));
            empty_all(&mut out_cells);
            return Ok(UnitOutput {
                cells: out_cells,
                orders,
                warnings,
            });
        }
        Err(e) => return Err(e),
    };
    let Prepared {
        cols,
        names,
        stats,
        raw_stats,
        logit,
        model,
    } = prepared;
    if model.estimator() == crate::covariance::Estimator::Em && !model.converged() {
        warnings.push(format!(
            "{tag}: EM stopped after {} iterations without converging",
            model.em_iterations()
        ));
    }
    let n = cols.len();
    let cov = model.cov();
    let total = cov.trace();

    // Validation rows in model space (standardized, logit first if enabled)
    // and the raw-space standardized truth used for scoring.
    let to_model = |c: usize, v: f64| {
        let v = match &logit {
            Some(lp) => logit_value(v.max(0.0), lp.col_max[c], lp.epsilon),
            None => v,
        };
        (v - stats.means[c]) / stats.stds[c]
    };
    let rows: Vec<Vec<Option<f64>>> = validation
        .iter()
        .map(|&i| (0..n).map(|c| m.get(i, cols[c]).map(|v| to_model(c, v))).collect())
        .collect();
    let truth: Vec<Vec<Option<f64>>> = validation
        .iter()
        .map(|&i| {
            (0..n)
                .map(|c| {
                    m.get(i, cols[c])
                        .map(|v| clip_standardized((v - raw_stats.means[c]) / raw_stats.stds[c]))
                })
                .collect()
        })
        .collect();

    let k_cap = cfg.k_max.min(n - 1);
    if k_cap < cfg.k_max {
        warnings.push(format!("{tag}: only {n} benchmarks, k capped at {k_cap}"));
    }
    for &method in &cfg.methods {
        let sel = match select_for(method, cov, k_cap, cfg.seed, p_idx, fold) {
            Ok(s) => s,
            Err(e) if e.kind() == ErrorKind::Numerical => {
                warnings.push(format!("{tag}, {}: selection failed: {e}", method.as_str()));
                for k in 1..=cfg.k_max {
                    out_cells.push(empty_cell(method, p, fold, k));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if sel.truncated {
            warnings.push(format!(
                "{tag}, {}: selection truncated at k={}",
                method.as_str(),
                sel.k()
            ));
        }
        warnings.extend(sel.warnings.iter().map(|w| format!("{tag}, {}: {w}", method.as_str())));
        orders.push(SelectionOrder {
            method,
            holdout_p: p,
            fold,
            benchmarks: sel.order.iter().map(|&c| names[c].clone()).collect(),
            truncated: sel.truncated,
        });
        for k in 1..=cfg.k_max {
            if k > sel.k() {
                out_cells.push(empty_cell(method, p, fold, k));
                continue;
            }
            let prefix = &sel.order[..k];
            out_cells.push(score_prefix(
                &model,
                &rows,
                &truth,
                prefix,
                &names,
                &stats,
                &raw_stats,
                logit.as_ref(),
                cfg.ridge,
                (method, p, fold, k),
            )?);
            let cell = out_cells.last_mut().expect("just pushed");
            cell.residual_fraction = (total > 0.0).then(|| sel.residual_trace[k] / total);
            cell.entropy = selection::entropy_value(cov, prefix).ok();
            cell.mi = selection::mi_value(cov, prefix).ok();
        }
    }
    Ok(UnitOutput {
        cells: out_cells,
        orders,
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn score_prefix(
    model: &GaussianModel,
    rows: &[Vec<Option<f64>>],
    truth: &[Vec<Option<f64>>],
    prefix: &[usize],
    names: &[String],
    stats: &ColumnStats,
    raw_stats: &ColumnStats,
    logit: Option<&LogitParams>,
    ridge: f64,
    key: (Method, f64, usize, usize),
) -> Result<CvCell> {
    let n = names.len();
    let mut in_prefix = vec![false; n];
    prefix.iter().for_each(|&c| in_prefix[c] = true);
    let mut cache: BTreeMap<Vec<usize>, Conditioner> = BTreeMap::new();
    let mut pred = Vec::new();
    let mut tgt = Vec::new();
    let mut by_col: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (row, t_row) in rows.iter().zip(truth) {
        let targets: Vec<usize> = (0..n).filter(|&c| !in_prefix[c] && row[c].is_some()).collect();
        if targets.is_empty() {
            continue;
        }
        let mut cond: Vec<usize> = prefix.iter().copied().filter(|&c| row[c].is_some()).collect();
        cond.sort_unstable();
        if !cache.contains_key(&cond) {
            cache.insert(cond.clone(), Conditioner::new(model, cond.clone(), ridge)?);
        }
        let values: Vec<f64> = cond.iter().map(|&c| row[c].unwrap_or(0.0)).collect();
        let predicted = cache[&cond].predict(&values, &targets);
        for (&c, z) in targets.iter().zip(predicted) {
            let score = match logit {
                Some(lp) => {
                    let raw = inverse_logit_value(z * stats.stds[c] + stats.means[c], lp.col_max[c]);
                    (raw - raw_stats.means[c]) / raw_stats.stds[c]
                }
                None => z,
            };
            let t = t_row[c].expect("targets are observed");
            pred.push(score);
            tgt.push(t);
            let e = by_col.entry(c).or_default();
            e.0.push(score);
            e.1.push(t);
        }
    }
    let (method, p, fold, k) = key;
    let mut cell = empty_cell(method, p, fold, k);
    cell.n_targets = pred.len();
    if !pred.is_empty() {
        cell.r2 = r2_standardized(&pred, &tgt)?;
        for (c, (pv, tv)) in by_col {
            cell.per_benchmark_r2
                .insert(names[c].clone(), r2_standardized(&pv, &tv)?);
        }
    }
    Ok(cell)
}

/// Runs the full protocol. Folds are processed in parallel and merged in a
/// fixed order, so the report does not depend on the thread count.
pub fn run_cv(m: &ScoreMatrix, cfg: &CvConfig) -> Result<CvReport> {
    run_cv_with_progress(m, cfg, |_| {})
}

/// [`run_cv`] with a callback invoked as each fold finishes (in completion order).
pub fn run_cv_with_progress(m: &ScoreMatrix, cfg: &CvConfig, progress: impl Fn(usize) + Sync) -> Result<CvReport> {
    cfg.validate(m.n_models())?;
    let folds = fold_assignment(m.n_models(), cfg.folds, cfg.seed);
    let units: Vec<Result<Vec<UnitOutput>>> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let validation = &folds[f];
            let mut pool: Vec<usize> = (0..m.n_models())
                .filter(|i| validation.binary_search(i).is_err())
                .collect();
            pool.shuffle(&mut rng_for(cfg.seed, "train", &[f as u64]));
            let outs = (0..cfg.holdout_fractions.len())
                .map(|p_idx| {
                    let size = training_size(m.n_models(), cfg.folds, pool.len(), cfg.holdout_fractions[p_idx]);
                    let mut train = pool[..size].to_vec();
                    train.sort_unstable();
                    run_unit(m, cfg, f, validation, &train, p_idx)
                })
                .collect();
            progress(f);
            outs
        })
        .collect();

    let mut cells = Vec::new();
    let mut orders = Vec::new();
    let mut warnings = Vec::new();
    for unit in units {
        for out in unit? {
            cells.extend(out.cells);
            orders.extend(out.orders);
            warnings.extend(out.warnings);
        }
    }
    let method_rank = |mm: Method| cfg.methods.iter().position(|&x| x == mm).unwrap_or(usize::MAX);
    let p_rank = |p: f64| cfg.holdout_fractions.iter().position(|&x| x == p).unwrap_or(usize::MAX);
    cells.sort_by_key(|c| (method_rank(c.method), p_rank(c.holdout_p), c.fold, c.k));
    orders.sort_by_key(|o| (method_rank(o.method), p_rank(o.holdout_p), o.fold));
    let summary = summarize(&cells, cfg);
    Ok(CvReport {
        config: cfg.clone(),
        fold_sizes: folds.iter().map(Vec::len).collect(),
        cells,
        selection_orders: orders,
        summary,
        warnings,
    })
}

fn summarize(cells: &[CvCell], cfg: &CvConfig) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &p in &cfg.holdout_fractions {
            for k in 1..=cfg.k_max {
                let group: Vec<&CvCell> = cells
                    .iter()
                    .filter(|c| c.method == method && c.holdout_p == p && c.k == k)
                    .collect();
                rows.push(SummaryRow {
                    method,
                    holdout_p: p,
                    k,
                    r2: Stat::of(group.iter().map(|c| c.r2)),
                    residual_fraction: Stat::of(group.iter().map(|c| c.residual_fraction)),
                    entropy: Stat::of(group.iter().map(|c| c.entropy)),
                    mi: Stat::of(group.iter().map(|c| c.mi)),
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDifference {
    pub first: Method,
    pub second: Method,
    /// Statistics of the per-fold differences `r2(first) - r2(second)`.
    pub diff: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub holdout_p: f64,
    pub k: usize,
    pub r2: BTreeMap<Method, Stat>,
    pub differences: Vec<MethodDifference>,
}

/// Per `(p, k)`: R² per method and paired per-fold differences for every
/// method pair, in configuration order.
pub fn compare_methods(report: &CvReport) -> Result<Vec<ComparisonRow>> {
    let methods = &report.config.methods;
    if methods.len() < 2 {
        return Err(Error::InvalidArgument("comparison needs at least two methods".into()));
    }
    let mut lookup: BTreeMap<(Method, usize, usize, usize), Option<f64>> = BTreeMap::new();
    let p_idx = |p: f64| report.config.holdout_fractions.iter().position(|&x| x == p);
    for c in &report.cells {
        let pi =
            p_idx(c.holdout_p).ok_or_else(|| Error::InvalidArgument(format!("unknown holdout {}", c.holdout_p)))?;
        lookup.insert((c.method, pi, c.fold, c.k), c.r2);
    }
    for &mm in methods {
        if !report.cells.iter().any(|c| c.method == mm) {
            return Err(Error::InvalidArgument(format!(
                "report has no cells for method {}",
                mm.as_str()
            )));
        }
    }
    let folds = report.fold_sizes.len();
    let mut rows = Vec::new();
    for (pi, &p) in report.config.holdout_fractions.iter().enumerate() {
        for k in 1..=report.config.k_max {
            let get = |mm: Method, f: usize| lookup.get(&(mm, pi, f, k)).copied().flatten();
            let r2 = methods
                .iter()
                .map(|&mm| (mm, Stat::of((0..folds).map(|f| get(mm, f)))))
                .collect();
            let mut differences = Vec::new();
            for a in 0..methods.len() {
                for b in (a + 1)..methods.len() {
                    let (x, y) = (methods[a], methods[b]);
                    let diffs = (0..folds).map(|f| match (get(x, f), get(y, f)) {
                        (Some(u), Some(v)) => Some(u - v),
                        _ => None,
                    });
                    differences.push(MethodDifference {
                        first: x,
                        second: y,
                        diff: Stat::of(diffs),
                    });
                }
            }
            rows.push(ComparisonRow {
                holdout_p: p,
                k,
                r2,
                differences,
            });
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per cell.
pub fn write_cells_csv<W: Write>(report: &CvReport, mut w: W) -> Result<()> {
    writeln!(w, "method,holdout_p,fold,k,r2,residual_fraction,entropy,mi,n_targets")?;
    for c in &report.cells {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            c.method.as_str(),
            c.holdout_p,
            c.fold,
            c.k,
            fmt_opt(c.r2),
            fmt_opt(c.residual_fraction),
            fmt_opt(c.entropy),
            fmt_opt(c.mi),
            c.n_targets
        )?;
    }
    Ok(())
}

/// One row per (cell, benchmark) with a defined per-benchmark R².
pub fn write_benchmark_r2_csv<W: Write>(report: &CvReport, mut w: W) -> Result<()> {
    writeln!(w, "method,holdout_p,fold,k,benchmark,r2")?;
    for c in &report.cells {
        for (name, r2) in &c.per_benchmark_r2 {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.method.as_str(),
                c.holdout_p,
                c.fold,
                c.k,
                name,
                fmt_opt(*r2)
            )?;
        }
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(report: &CvReport, mut w: W) -> Result<()> {
    writeln!(
        w,
        "method,holdout_p,k,n_folds,r2_mean,r2_std,residual_fraction_mean,residual_fraction_std,entropy_mean,entropy_std,mi_mean,mi_std"
    )?;
    for s in &report.summary {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s.method.as_str(),
            s.holdout_p,
            s.k,
            s.r2.n,
            fmt_opt(s.r2.mean),
            fmt_opt(s.r2.std),
            fmt_opt(s.residual_fraction.mean),
            fmt_opt(s.residual_fraction.std),
            fmt_opt(s.entropy.mean),
            fmt_opt(s.entropy.std),
            fmt_opt(s.mi.mean),
            fmt_opt(s.mi.std)
        )?;
    }
    Ok(())
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], mut w: W) -> Result<()> {
    writeln!(
        w,
        "holdout_p,k,first,second,first_mean,first_std,second_mean,second_std,diff_mean,diff_std,n_folds"
    )?;
    for r in rows {
        for d in &r.differences {
            let (a, b) = (&r.r2[&d.first], &r.r2[&d.second]);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.holdout_p,
                r.k,
                d.first.as_str(),
                d.second.as_str(),
                fmt_opt(a.mean),
                fmt_opt(a.std),
                fmt_opt(b.mean),
                fmt_opt(b.std),
                fmt_opt(d.diff.mean),
                fmt_opt(d.diff.std),
                d.diff.n
            )?;
        }
    }
    Ok(())
}
