//! Greedy benchmark selection on a covariance matrix.
//!
//! Greedy entropy maximization is pivoted Cholesky with the largest residual
//! diagonal as pivot, so the eager, lazy and budgeted variants all share one
//! incremental factor ([`Factor`]). Greedy MI refactors the complement block
//! at every step.
//!
//! Ties are broken toward the lowest column index everywhere.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// `ln(2 pi e)`.
pub const LN_2PI_E: f64 = 2.837_877_066_409_345_5;
/// Picks with residual variance below this fraction of the largest initial
/// diagonal entry are refused.
pub const DEGENERACY_FLOOR: f64 = 1e-12;
/// Residual diagonals below `-NOT_PSD_TOL * scale` mean the input was not PSD.
pub const NOT_PSD_TOL: f64 = 1e-9;
/// Eigenvalue clamp used when a log-determinant falls back to the spectrum.
pub const DEFAULT_MI_FLOOR: f64 = 1e-10;
/// MI gains within this distance of zero are reported as zero.
pub const ZERO_GAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Entropy,
    Mi,
    BudgetedEntropy,
    Random,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Entropy => "entropy",
            Objective::Mi => "mi",
            Objective::BudgetedEntropy => "budgeted_entropy",
            Objective::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub order: Vec<usize>,
    /// Marginal gain of each pick in nats. For budgeted selection these
    /// include the shift constant.
    pub gains: Vec<f64>,
    /// `residual_trace[t]` is the trace of the conditional covariance of the
    /// unselected columns after `t` picks.
    pub residual_trace: Vec<f64>,
    pub objective: Objective,
    pub seed: Option<u64>,
    /// Selection stopped before `k` because the remaining residual variance
    /// was numerically zero.
    pub truncated: bool,
    /// Gain evaluations, reported by the lazy variant.
    pub evaluations: Option<usize>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    fn new(objective: Objective) -> Self {
        Self {
            order: Vec::new(),
            gains: Vec::new(),
            residual_trace: Vec::new(),
            objective,
            seed: None,
            truncated: false,
            evaluations: None,
            warnings: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.order.len()
    }

    /// JSON-ready view with column names resolved.
    pub fn report(&self, names: &[String]) -> Result<SelectionReport> {
        let selected = self
            .order
            .iter()
            .map(|&j| {
                names.get(j).cloned().ok_or(Error::DimensionMismatch {
                    expected: names.len(),
                    actual: j + 1,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SelectionReport {
            objective: self.objective,
            selected,
            indices: self.order.clone(),
            gains: self.gains.clone(),
            residual_trace: self.residual_trace.clone(),
            truncated: self.truncated,
            seed: self.seed,
            evaluations: self.evaluations,
            warnings: self.warnings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub objective: Objective,
    pub selected: Vec<String>,
    pub indices: Vec<usize>,
    pub gains: Vec<f64>,
    pub residual_trace: Vec<f64>,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<usize>,
    pub warnings: Vec<String>,
}

fn check_cov(s: &DMatrix<f64>) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            actual: s.ncols(),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
    }
    let asym = linalg::max_asymmetry(s);
    if asym > 1e-8 * linalg::max_abs(s).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    if let Some(j) = (0..s.nrows()).find(|&j| s[(j, j)] < 0.0) {
        return Err(Error::NotPsd(s[(j, j)]));
    }
    Ok(())
}

fn check_k(k: usize, max: usize) -> Result<()> {
    if k < 1 || k > max {
        return Err(Error::InvalidArgument(format!("k must be in 1..={max}, got {k}")));
    }
    Ok(())
}

fn entropy_gain(d: f64) -> f64 {
    0.5 * (LN_2PI_E + d.ln())
}

/// Incremental pivoted Cholesky where rows can be brought up to date one
/// element at a time. Every update goes through [`Factor::advance`], so eager
/// and lazy schedules produce bit-identical residuals.
struct Factor<'a> {
    s: &'a DMatrix<f64>,
    d: Vec<f64>,
    rows: Vec<Vec<f64>>,
    order: Vec<usize>,
    pivot_d: Vec<f64>,
    selected: Vec<bool>,
    scale: f64,
}

impl<'a> Factor<'a> {
    fn new(s: &'a DMatrix<f64>) -> Self {
        let n = s.nrows();
        let d: Vec<f64> = (0..n).map(|j| s[(j, j)]).collect();
        let scale = d.iter().fold(0.0f64, |a, &b| a.max(b));
        Self {
            s,
            d,
            rows: vec![Vec::new(); n],
            order: Vec::new(),
            pivot_d: Vec::new(),
            selected: vec![false; n],
            scale,
        }
    }

    fn n(&self) -> usize {
        self.d.len()
    }

    fn floor(&self) -> f64 {
        DEGENERACY_FLOOR * self.scale
    }

    /// Computes the next Cholesky entry of row `j`.
    fn advance(&mut self, j: usize) {
        let t = self.rows[j].len();
        let p = self.order[t];
        let dot: f64 = (0..t).map(|s| self.rows[j][s] * self.rows[p][s]).sum();
        let l = (self.s[(j, p)] - dot) / self.pivot_d[t].sqrt();
        self.rows[j].push(l);
        self.d[j] -= l * l;
    }

    fn catch_up(&mut self, j: usize) {
        while self.rows[j].len() < self.order.len() {
            self.advance(j);
        }
    }

    fn select(&mut self, p: usize) {
        self.order.push(p);
        self.pivot_d.push(self.d[p]);
        self.selected[p] = true;
    }

    /// Selects `p` and updates every other unselected row.
    fn select_eager(&mut self, p: usize) -> Result<()> {
        self.select(p);
        for j in 0..self.n() {
            if !self.selected[j] {
                self.advance(j);
                self.check_residual(j)?;
            }
        }
        Ok(())
    }

    fn check_residual(&self, j: usize) -> Result<()> {
        if self.d[j] < -NOT_PSD_TOL * self.scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPsd(self.d[j]));
        }
        Ok(())
    }

    fn residual_sum(&self) -> f64 {
        (0..self.n()).filter(|&j| !self.selected[j]).map(|j| self.d[j]).sum()
    }

    /// Unselected index with the largest residual, lowest index on ties.
    fn argmax_residual(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in 0..self.n() {
            if !self.selected[j] && best.is_none_or(|b| self.d[j] > self.d[b]) {
                best = Some(j);
            }
        }
        best
    }
}

/// Greedy entropy maximization.
pub fn greedy_entropy(s: &DMatrix<f64>, k: usize) -> Result<SelectionResult> {
    check_cov(s)?;
    check_k(k, s.nrows())?;
    let mut f = Factor::new(s);
    let mut out = SelectionResult::new(Objective::Entropy);
    out.residual_trace.push(f.residual_sum());
    while out.order.len() < k {
        let p = f.argmax_residual().expect("k <= N leaves a candidate");
        if !(f.d[p] >= f.floor()) || f.d[p] <= 0.0 {
            out.truncated = true;
            break;
        }
        out.gains.push(entropy_gain(f.d[p]));
        f.select_eager(p)?;
        out.order.push(p);
        out.residual_trace.push(f.residual_sum());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapKey {
    d: f64,
    idx: usize,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d.total_cmp(&other.d).then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lazy greedy entropy maximization. Same output as [`greedy_entropy`];
/// stale residuals are upper bounds and only the heap top is refreshed.
pub fn lazy_greedy_entropy(s: &DMatrix<f64>, k: usize) -> Result<SelectionResult> {
    check_cov(s)?;
    check_k(k, s.nrows())?;
    let n = s.nrows();
    let mut f = Factor::new(s);
    let mut heap: BinaryHeap<HeapKey> = (0..n).map(|idx| HeapKey { d: f.d[idx], idx }).collect();
    let mut evaluations = n;
    let mut out = SelectionResult::new(Objective::Entropy);
    let mut truncated = false;
    while f.order.len() < k {
        let top = heap.pop().expect("unselected candidates remain");
        if f.rows[top.idx].len() < f.order.len() {
            f.catch_up(top.idx);
            f.check_residual(top.idx)?;
            evaluations += 1;
            heap.push(HeapKey {
                d: f.d[top.idx],
                idx: top.idx,
            });
            continue;
        }
        if !(top.d >= f.floor()) || top.d <= 0.0 {
            truncated = true;
            break;
        }
        out.gains.push(entropy_gain(top.d));
        f.select(top.idx);
    }
    out.order = f.order.clone();
    out.residual_trace = residual_trace_along(s, &out.order)?;
    out.truncated = truncated;
    out.evaluations = Some(evaluations);
    Ok(out)
}

/// Residual traces after each prefix of `order`, using the same incremental
/// arithmetic as the greedy runs.
pub fn residual_trace_along(s: &DMatrix<f64>, order: &[usize]) -> Result<Vec<f64>> {
    check_cov(s)?;
    let mut f = Factor::new(s);
    let mut trace = vec![f.residual_sum()];
    for &p in order {
        if p >= f.n() || f.selected[p] {
            return Err(Error::InvalidArgument(format!("invalid or repeated index {p}")));
        }
        f.select_eager(p)?;
        trace.push(f.residual_sum());
    }
    Ok(trace)
}

/// Entropy gains and residual traces along a fixed order.
pub fn annotate_entropy(s: &DMatrix<f64>, result: &mut SelectionResult) -> Result<()> {
    check_cov(s)?;
    let mut f = Factor::new(s);
    result.gains.clear();
    result.residual_trace = vec![f.residual_sum()];
    for &p in &result.order {
        if p >= f.n() || f.selected[p] {
            return Err(Error::InvalidArgument(format!("invalid or repeated index {p}")));
        }
        result.gains.push(entropy_gain(f.d[p].max(f64::MIN_POSITIVE)));
        f.select_eager(p)?;
        result.residual_trace.push(f.residual_sum());
    }
    Ok(())
}

/// Diagonal of the inverse of `block`, by triangular solve when the block is
/// positive definite and from the clamped spectrum otherwise.
fn precision_diagonal(block: &DMatrix<f64>, floor: f64) -> (Vec<f64>, bool) {
    let n = block.nrows();
    if let Some(chol) = linalg::cholesky(block.clone()) {
        let l = chol.l();
        if let Some(linv) = l.solve_lower_triangular(&DMatrix::identity(n, n)) {
            let diag: Vec<f64> = (0..n).map(|j| linv.column(j).norm_squared()).collect();
            if diag.iter().all(|v| v.is_finite()) {
                return (diag, false);
            }
        }
    }
    let (values, vectors) = linalg::sorted_eigen(block);
    let diag = (0..n)
        .map(|v| (0..n).map(|i| vectors[(v, i)].powi(2) / values[i].max(floor)).sum())
        .collect();
    (diag, true)
}

pub fn greedy_mi(s: &DMatrix<f64>, k: usize) -> Result<SelectionResult> {
    greedy_mi_with(s, k, DEFAULT_MI_FLOOR)
}

/// Greedy mutual-information maximization with an explicit eigenvalue floor
/// for the spectral fallback. Negative gains are kept and reported.
pub fn greedy_mi_with(s: &DMatrix<f64>, k: usize, psd_floor: f64) -> Result<SelectionResult> {
    check_cov(s)?;
    let n = s.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("MI selection needs at least two columns".into()));
    }
    check_k(k, n - 1)?;
    let mut f = Factor::new(s);
    let mut out = SelectionResult::new(Objective::Mi);
    out.residual_trace.push(f.residual_sum());
    let mut fallback_steps = Vec::new();
    while out.order.len() < k {
        let complement: Vec<usize> = (0..n).filter(|&j| !f.selected[j]).collect();
        let (prec, fell_back) = precision_diagonal(&linalg::principal(s, &complement), psd_floor);
        if fell_back {
            fallback_steps.push(out.order.len() + 1);
        }
        let mut best: Option<(usize, f64)> = None;
        for (a, &j) in complement.iter().enumerate() {
            if !(f.d[j] >= f.floor()) || f.d[j] <= 0.0 {
                continue;
            }
            // The product is invariant under exact rescaling, unlike a sum of logs.
            let crit = f.d[j] * prec[a];
            if best.is_none_or(|(_, c)| crit > c) {
                best = Some((j, crit));
            }
        }
        let Some((p, crit)) = best else {
            out.truncated = true;
            break;
        };
        out.gains.push(0.5 * crit.ln());
        f.select_eager(p)?;
        out.order.push(p);
        out.residual_trace.push(f.residual_sum());
    }
    if !fallback_steps.is_empty() {
        out.warnings.push(format!(
            "complement block not positive definite at steps {fallback_steps:?}; used clamped eigenvalues"
        ));
    }
    let steps = |keep: &dyn Fn(f64) -> bool| -> Vec<usize> {
        (0..out.gains.len())
            .filter(|&t| keep(out.gains[t]))
            .map(|t| t + 1)
            .collect()
    };
    let zero = steps(&|g| g.abs() <= ZERO_GAIN_TOL);
    let negative = steps(&|g| g < -ZERO_GAIN_TOL);
    if !zero.is_empty() {
        out.warnings
            .push(format!("zero MI gain at steps {zero:?}; ties broken by lowest index"));
    }
    if !negative.is_empty() {
        out.warnings.push(format!("negative MI gain at steps {negative:?}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub costs: Vec<f64>,
    pub budget: f64,
    /// Added to every entropy marginal so the objective stays nonnegative.
    pub shift_c: f64,
}

impl CostModel {
    /// Uses [`default_shift`] for the shift constant.
    pub fn new(s: &DMatrix<f64>, costs: Vec<f64>, budget: f64) -> Self {
        Self {
            costs,
            budget,
            shift_c: default_shift(s),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.costs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: self.costs.len(),
            });
        }
        if let Some(c) = self.costs.iter().find(|&&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("costs must be positive, got {c}")));
        }
        if !(self.budget > 0.0) {
            return Err(Error::InvalidArgument("budget must be positive".into()));
        }
        if !self.shift_c.is_finite() {
            return Err(Error::InvalidArgument("shift_c must be finite".into()));
        }
        Ok(())
    }
}

/// `max(0, -min_j 0.5 ln(2 pi e Sigma_jj))`.
pub fn default_shift(s: &DMatrix<f64>) -> f64 {
    let min = (0..s.nrows())
        .map(|j| entropy_gain(s[(j, j)].max(f64::MIN_POSITIVE)))
        .fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        (-min).max(0.0)
    } else {
        0.0
    }
}

/// Modified greedy under a knapsack budget: the better of the cost-effective
/// greedy set and the best affordable singleton.
pub fn budgeted_entropy(s: &DMatrix<f64>, cm: &CostModel) -> Result<SelectionResult> {
    check_cov(s)?;
    let n = s.nrows();
    cm.validate(n)?;
    let shifted = |d: f64| entropy_gain(d) + cm.shift_c;
    let mut f = Factor::new(s);
    let affordable: Vec<usize> = (0..n)
        .filter(|&j| cm.costs[j] <= cm.budget && f.d[j] > f.floor())
        .collect();
    if affordable.is_empty() {
        return Err(Error::InvalidArgument("no element fits within the budget".into()));
    }

    let mut warnings = Vec::new();
    let mut negative = false;
    let mut spent = 0.0;
    let mut gains = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if f.selected[j] || spent + cm.costs[j] > cm.budget || !(f.d[j] >= f.floor()) || f.d[j] <= 0.0 {
                continue;
            }
            let g = shifted(f.d[j]);
            negative |= g < 0.0;
            let ratio = g / cm.costs[j];
            // The log flattens ulp-level differences in d; break those ties on d itself.
            if best.is_none_or(|(b, r)| ratio > r || (ratio == r && f.d[j] > f.d[b])) {
                best = Some((j, ratio));
            }
        }
        let Some((p, _)) = best else { break };
        gains.push(shifted(f.d[p]));
        spent += cm.costs[p];
        f.select_eager(p)?;
    }
    let set_value: f64 = gains.iter().sum();

    let mut single: Option<(usize, f64)> = None;
    for &j in &affordable {
        let g = shifted(s[(j, j)]);
        if single.is_none_or(|(_, v)| g > v) {
            single = Some((j, g));
        }
    }
    let (single_idx, single_value) = single.expect("affordable is nonempty");

    if negative {
        warnings.push(format!(
            "shift_c = {} leaves negative shifted marginals; the approximation guarantee does not apply",
            cm.shift_c
        ));
    }
    let mut out = SelectionResult::new(Objective::BudgetedEntropy);
    if set_value >= single_value {
        out.order = f.order.clone();
        out.gains = gains;
    } else {
        out.order = vec![single_idx];
        out.gains = vec![single_value];
        warnings.push("best single element beat the cost-effective greedy set".into());
    }
    out.residual_trace = residual_trace_along(s, &out.order)?;
    out.warnings = warnings;
    Ok(out)
}

/// First `k` entries of a seeded uniform permutation of `0..n`. Gains and
/// residual traces are left empty; see [`annotate_entropy`].
pub fn random_select(n: usize, k: usize, seed: u64) -> Result<SelectionResult> {
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds N = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_select_with(n, k, &mut rng).map(|mut r| {
        r.seed = Some(seed);
        r
    })
}

pub fn random_select_with(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<SelectionResult> {
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds N = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.truncate(k);
    let mut out = SelectionResult::new(Objective::Random);
    out.order = perm;
    Ok(out)
}

fn check_subset(n: usize, a: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &j in a {
        if j >= n || seen[j] {
            return Err(Error::InvalidArgument(format!("invalid or repeated index {j}")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// `0.5 log det(2 pi e Sigma_AA)` in nats.
pub fn entropy_value(s: &DMatrix<f64>, a: &[usize]) -> Result<f64> {
    check_cov(s)?;
    check_subset(s.nrows(), a)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("entropy of an empty set".into()));
    }
    let chol = linalg::cholesky(linalg::principal(s, a))
        .ok_or_else(|| Error::Singular(format!("principal submatrix on {a:?}")))?;
    Ok(0.5 * (a.len() as f64 * LN_2PI_E + linalg::chol_logdet(&chol)))
}

/// Mutual information between the selected block and its complement, zero
/// when either side is empty.
pub fn mi_value(s: &DMatrix<f64>, a: &[usize]) -> Result<f64> {
    mi_value_with(s, a, DEFAULT_MI_FLOOR)
}

pub fn mi_value_with(s: &DMatrix<f64>, a: &[usize], psd_floor: f64) -> Result<f64> {
    check_cov(s)?;
    let n = s.nrows();
    check_subset(n, a)?;
    if a.is_empty() || a.len() == n {
        return Ok(0.0);
    }
    let mut in_a = vec![false; n];
    a.iter().for_each(|&j| in_a[j] = true);
    let comp: Vec<usize> = (0..n).filter(|&j| !in_a[j]).collect();
    let ld_a = linalg::logdet(&linalg::principal(s, a), psd_floor);
    let ld_c = linalg::logdet(&linalg::principal(s, &comp), psd_floor);
    let ld = linalg::logdet(s, psd_floor);
    Ok(0.5 * (ld_a + ld_c - ld))
}

/// `tr(Sigma_CC - Sigma_CA Sigma_AA^{-1} Sigma_AC)` for the complement `C`.
pub fn residual_trace(s: &DMatrix<f64>, a: &[usize]) -> Result<f64> {
    check_cov(s)?;
    let n = s.nrows();
    check_subset(n, a)?;
    if a.is_empty() {
        return Ok(s.trace());
    }
    let mut in_a = vec![false; n];
    a.iter().for_each(|&j| in_a[j] = true);
    let comp: Vec<usize> = (0..n).filter(|&j| !in_a[j]).collect();
    let chol = linalg::cholesky(linalg::principal(s, a))
        .ok_or_else(|| Error::Singular(format!("principal submatrix on {a:?}")))?;
    let s_ac = linalg::block(s, a, &comp);
    let solved = chol.solve(&s_ac);
    Ok(comp
        .iter()
        .enumerate()
        .map(|(c, &j)| s[(j, j)] - s_ac.column(c).dot(&solved.column(c)))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    /// Cumulative explained fraction `rho(k)`, `k = 1..=N`.
    pub explained: Vec<f64>,
    pub residual_fraction: Vec<f64>,
}

impl SpectrumReport {
    /// Smallest `k` whose explained fraction reaches `threshold`.
    pub fn components_for(&self, threshold: f64) -> Option<usize> {
        self.explained
            .iter()
            .position(|&r| r >= threshold - 1e-12)
            .map(|i| i + 1)
    }
}

/// Eigenvalues (clamped at zero, descending) and explained-variance curves.
pub fn spectrum(r: &DMatrix<f64>) -> Result<SpectrumReport> {
    check_cov(r)?;
    let (values, _) = linalg::sorted_eigen(r);
    let eigenvalues: Vec<f64> = values.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let mut acc = 0.0;
    let explained: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| {
            acc += l;
            if total > 0.0 {
                (acc / total).min(1.0)
            } else {
                0.0
            }
        })
        .collect();
    let residual_fraction = explained.iter().map(|&e| 1.0 - e).collect();
    Ok(SpectrumReport {
        eigenvalues,
        explained,
        residual_fraction,
    })
}
