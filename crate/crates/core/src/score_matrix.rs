//! Model-by-benchmark score matrices with an observation mask.
//!
//! Unobserved cells hold a NaN sentinel in the value buffer. The buffer is
//! private and every read goes through the mask, so the sentinel never
//! reaches arithmetic.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_ROW_LABEL: &str = "model";

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    row_label: String,
    model_names: Vec<String>,
    benchmark_names: Vec<String>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

/// Missing cells compare equal regardless of the stored sentinel.
impl PartialEq for ScoreMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.row_label == other.row_label
            && self.model_names == other.model_names
            && self.benchmark_names == other.benchmark_names
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &o)| !o || a == b)
    }
}

impl ScoreMatrix {
    /// Builds a matrix from row-major cells, `None` marking a missing score.
    ///
    /// Rejects duplicate names, rows without observations and columns with
    /// fewer than two observations.
    pub fn new(model_names: Vec<String>, benchmark_names: Vec<String>, cells: Vec<Option<f64>>) -> Result<Self> {
        let m = Self::build(model_names, benchmark_names, cells)?;
        m.validate()?;
        Ok(m)
    }

    fn build(model_names: Vec<String>, benchmark_names: Vec<String>, cells: Vec<Option<f64>>) -> Result<Self> {
        let n = benchmark_names.len();
        let expected = model_names.len() * n;
        if cells.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: cells.len(),
            });
        }
        let mut values = Vec::with_capacity(cells.len());
        let mut mask = Vec::with_capacity(cells.len());
        for (idx, cell) in cells.into_iter().enumerate() {
            match cell {
                Some(v) if v.is_finite() => {
                    values.push(v);
                    mask.push(true);
                }
                Some(v) => {
                    return Err(Error::InvalidColumn {
                        column: benchmark_names[idx % n].clone(),
                        message: format!("non-finite value {v} for model {:?}", model_names[idx / n]),
                    })
                }
                None => {
                    values.push(f64::NAN);
                    mask.push(false);
                }
            }
        }
        Ok(Self {
            row_label: DEFAULT_ROW_LABEL.to_string(),
            model_names,
            benchmark_names,
            values,
            mask,
        })
    }

    pub fn from_rows(
        model_names: Vec<String>,
        benchmark_names: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let n = benchmark_names.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: bad.len(),
            });
        }
        Self::new(model_names, benchmark_names, rows.into_iter().flatten().collect())
    }

    /// Fully observed matrix from a dense row-major buffer.
    pub fn from_dense(model_names: Vec<String>, benchmark_names: Vec<String>, values: &[f64]) -> Result<Self> {
        Self::new(model_names, benchmark_names, values.iter().map(|&v| Some(v)).collect())
    }

    pub fn with_row_label(mut self, label: impl Into<String>) -> Self {
        self.row_label = label.into();
        self
    }

    fn validate(&self) -> Result<()> {
        check_unique("model", &self.model_names)?;
        check_unique("benchmark", &self.benchmark_names)?;
        for i in 0..self.n_models() {
            if self.row_observed_count(i) == 0 {
                return Err(Error::EmptyRow {
                    row: self.model_names[i].clone(),
                });
            }
        }
        for j in 0..self.n_benchmarks() {
            let observed = self.column_observed_count(j);
            if observed < 2 {
                return Err(Error::SparseColumn {
                    column: self.benchmark_names[j].clone(),
                    observed,
                    required: 2,
                });
            }
        }
        Ok(())
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn n_benchmarks(&self) -> usize {
        self.benchmark_names.len()
    }

    pub fn row_label(&self) -> &str {
        &self.row_label
    }

    pub fn model_names(&self) -> &[String] {
        &self.model_names
    }

    pub fn benchmark_names(&self) -> &[String] {
        &self.benchmark_names
    }

    pub fn benchmark_index(&self, name: &str) -> Option<usize> {
        self.benchmark_names.iter().position(|b| b == name)
    }

    #[inline]
    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.n_benchmarks() + col]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let idx = row * self.n_benchmarks() + col;
        self.mask[idx].then(|| self.values[idx])
    }

    pub fn row(&self, row: usize) -> Vec<Option<f64>> {
        (0..self.n_benchmarks()).map(|j| self.get(row, j)).collect()
    }

    /// `(column, value)` pairs of the observed cells of a row.
    pub fn observed_in_row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n_benchmarks()).filter_map(move |j| self.get(row, j).map(|v| (j, v)))
    }

    pub fn column_observed(&self, col: usize) -> Vec<f64> {
        (0..self.n_models()).filter_map(|i| self.get(i, col)).collect()
    }

    pub fn row_observed_count(&self, row: usize) -> usize {
        let n = self.n_benchmarks();
        self.mask[row * n..(row + 1) * n].iter().filter(|&&o| o).count()
    }

    pub fn column_observed_count(&self, col: usize) -> usize {
        (0..self.n_models()).filter(|&i| self.is_observed(i, col)).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&o| o)
    }

    pub fn observed_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&o| o).count() as f64 / self.mask.len() as f64
    }

    /// Dense copy, only for fully observed matrices.
    pub fn to_dense(&self) -> Result<nalgebra::DMatrix<f64>> {
        if !self.is_complete() {
            return Err(Error::MissingData("a dense copy needs every cell observed".into()));
        }
        Ok(nalgebra::DMatrix::from_row_slice(
            self.n_models(),
            self.n_benchmarks(),
            &self.values,
        ))
    }

    /// Sub-matrix over the given rows and columns (in the given order).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let mut cells = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                cells.push(self.get(i, j));
            }
        }
        let m = Self::new(
            rows.iter().map(|&i| self.model_names[i].clone()).collect(),
            cols.iter().map(|&j| self.benchmark_names[j].clone()).collect(),
            cells,
        )?;
        Ok(m.with_row_label(self.row_label.clone()))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let cols: Vec<usize> = (0..self.n_benchmarks()).collect();
        self.select(rows, &cols)
    }

    /// Applies `f(col, value)` to every observed cell; mask and labels are kept.
    pub(crate) fn map_observed(&self, mut f: impl FnMut(usize, f64) -> f64) -> Self {
        let n = self.n_benchmarks();
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .map(|(idx, (&v, &o))| if o { f(idx % n, v) } else { f64::NAN })
            .collect();
        Self { values, ..self.clone() }
    }
}

fn check_unique(what: &'static str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName {
                what,
                name: name.clone(),
            });
        }
    }
    Ok(())
}

fn parse_cell(raw: &str, line: usize) -> Result<Option<f64>> {
    let cell = raw.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    // Rust's float parser accepts "NaN" and "inf"; neither is a valid score.
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::MalformedCsv {
            line,
            message: format!("cell {cell:?} is not a decimal number (use an empty cell for missing)"),
        }),
    }
}

/// Reads a score matrix: a header row (row label, benchmark names) followed by
/// one row per model. Empty cells are missing scores.
pub fn load_csv<R: Read>(source: R) -> Result<ScoreMatrix> {
    let (model_names, benchmark_names, cells, row_label) = read_cells(source)?;
    Ok(ScoreMatrix::new(model_names, benchmark_names, cells)?.with_row_label(row_label))
}

/// Like [`load_csv`] but accepts sparse columns and empty rows, for matrices
/// that are only predicted into (never used to estimate anything).
pub fn load_csv_sparse<R: Read>(source: R) -> Result<ScoreMatrix> {
    let (model_names, benchmark_names, cells, row_label) = read_cells(source)?;
    let mut m = ScoreMatrix::build(model_names, benchmark_names, cells)?;
    check_unique("model", &m.model_names)?;
    check_unique("benchmark", &m.benchmark_names)?;
    m.row_label = row_label;
    Ok(m)
}

type Cells = (Vec<String>, Vec<String>, Vec<Option<f64>>, String);

fn read_cells<R: Read>(source: R) -> Result<Cells> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_reader(source);

    let mut records = reader.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| csv_error(&e))?,
        None => {
            return Err(Error::MalformedCsv {
                line: 1,
                message: "empty input".into(),
            })
        }
    };
    let header_line = header.position().map_or(1, |p| p.line() as usize);
    reject_quotes(&header, header_line)?;
    if header.len() < 2 {
        return Err(Error::MalformedCsv {
            line: header_line,
            message: "header needs a row label and at least one benchmark".into(),
        });
    }
    let row_label = header[0].trim().to_string();
    let benchmark_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if let Some(pos) = benchmark_names.iter().position(String::is_empty) {
        return Err(Error::MalformedCsv {
            line: header_line,
            message: format!("benchmark name in column {} is empty", pos + 2),
        });
    }
    let n = benchmark_names.len();

    let mut model_names = Vec::new();
    let mut cells = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        reject_quotes(&rec, line)?;
        if rec.len() != n + 1 {
            return Err(Error::MalformedCsv {
                line,
                message: format!("expected {} cells, found {}", n + 1, rec.len()),
            });
        }
        let name = rec[0].trim();
        if name.is_empty() {
            return Err(Error::MalformedCsv {
                line,
                message: "model name is empty".into(),
            });
        }
        model_names.push(name.to_string());
        for raw in rec.iter().skip(1) {
            cells.push(parse_cell(raw, line)?);
        }
    }
    if model_names.is_empty() {
        return Err(Error::MalformedCsv {
            line: header_line,
            message: "no model rows".into(),
        });
    }
    Ok((model_names, benchmark_names, cells, row_label))
}

fn csv_error(e: &csv::Error) -> Error {
    Error::MalformedCsv {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

fn reject_quotes(rec: &csv::StringRecord, line: usize) -> Result<()> {
    if rec.iter().any(|c| c.contains('"')) {
        return Err(Error::MalformedCsv {
            line,
            message: "quoted cells are not supported".into(),
        });
    }
    Ok(())
}

fn check_writable(name: &str) -> Result<()> {
    if name.contains([',', '"', '\n', '\r']) || name.trim() != name {
        return Err(Error::InvalidArgument(format!(
            "label {name:?} cannot be written to CSV without quoting"
        )));
    }
    Ok(())
}

/// Writes the matrix in the same schema `load_csv` reads. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(m: &ScoreMatrix, out: W) -> Result<()> {
    write_table(
        &m.row_label,
        &m.model_names,
        &m.benchmark_names,
        |i, j| m.get(i, j),
        out,
    )
}

/// Same layout as [`write_csv`] for an arbitrary cell function; `None` is an
/// empty field.
pub fn write_table<W: Write>(
    row_label: &str,
    rows: &[String],
    cols: &[String],
    cell: impl Fn(usize, usize) -> Option<f64>,
    mut out: W,
) -> Result<()> {
    check_writable(row_label)?;
    cols.iter().try_for_each(|b| check_writable(b))?;
    rows.iter().try_for_each(|b| check_writable(b))?;

    let mut line = row_label.to_string();
    for b in cols {
        line.push(',');
        line.push_str(b);
    }
    writeln!(out, "{line}")?;
    for (i, name) in rows.iter().enumerate() {
        line.clear();
        line.push_str(name);
        for j in 0..cols.len() {
            line.push(',');
            if let Some(v) = cell(i, j) {
                line.push_str(&v.to_string());
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Keeps the rows whose observed fraction is at least `min_fraction`.
pub fn drop_sparse_rows(m: &ScoreMatrix, min_fraction: f64) -> Result<ScoreMatrix> {
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::InvalidArgument(format!(
            "min_fraction must be in [0, 1], got {min_fraction}"
        )));
    }
    let n = m.n_benchmarks() as f64;
    let keep: Vec<usize> = (0..m.n_models())
        .filter(|&i| m.row_observed_count(i) as f64 / n >= min_fraction)
        .collect();
    m.select_rows(&keep)
}

/// Per-column location and scale used for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Identifies the data the statistics were computed from.
    pub source: String,
}

impl ColumnStats {
    /// Observed-cell means and sample standard deviations (n - 1 denominator).
    /// Constant columns are rejected.
    pub fn from_matrix(m: &ScoreMatrix, source: impl Into<String>) -> Result<Self> {
        let mut means = Vec::with_capacity(m.n_benchmarks());
        let mut stds = Vec::with_capacity(m.n_benchmarks());
        for j in 0..m.n_benchmarks() {
            let col = m.column_observed(j);
            if col.len() < 2 {
                return Err(Error::SparseColumn {
                    column: m.benchmark_names()[j].clone(),
                    observed: col.len(),
                    required: 2,
                });
            }
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            let std = var.sqrt();
            if !(std > 0.0) || std <= 1e-12 * mean.abs() {
                return Err(Error::ZeroVariance {
                    column: m.benchmark_names()[j].clone(),
                });
            }
            means.push(mean);
            stds.push(std);
        }
        Ok(Self {
            means,
            stds,
            source: source.into(),
        })
    }

    fn check(&self, n: usize) -> Result<()> {
        for len in [self.means.len(), self.stds.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(())
    }
}

/// `(value - mean_j) / std_j` on every observed cell.
pub fn standardize(m: &ScoreMatrix, stats: &ColumnStats) -> Result<ScoreMatrix> {
    stats.check(m.n_benchmarks())?;
    Ok(m.map_observed(|j, v| (v - stats.means[j]) / stats.stds[j]))
}

pub fn destandardize(m: &ScoreMatrix, stats: &ColumnStats) -> Result<ScoreMatrix> {
    stats.check(m.n_benchmarks())?;
    Ok(m.map_observed(|j, v| v * stats.stds[j] + stats.means[j]))
}

pub const DEFAULT_LOGIT_EPSILON: f64 = 1e-3;

/// Per-benchmark maxima and the clipping bound of the logit transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitParams {
    pub col_max: Vec<f64>,
    pub epsilon: f64,
}

impl LogitParams {
    pub fn new(col_max: Vec<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "logit epsilon must be in (0, 0.5), got {epsilon}"
            )));
        }
        if let Some(j) = col_max.iter().position(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidColumn {
                column: format!("#{j}"),
                message: format!("column maximum {} must be positive", col_max[j]),
            });
        }
        Ok(Self { col_max, epsilon })
    }

    /// Column maxima over the observed cells of `m` (the training data).
    pub fn from_matrix(m: &ScoreMatrix, epsilon: f64) -> Result<Self> {
        check_nonnegative(m)?;
        let mut col_max = Vec::with_capacity(m.n_benchmarks());
        for j in 0..m.n_benchmarks() {
            let max = m.column_observed(j).into_iter().fold(f64::NEG_INFINITY, f64::max);
            if !(max > 0.0) {
                return Err(Error::InvalidColumn {
                    column: m.benchmark_names()[j].clone(),
                    message: format!("logit transform needs a positive maximum, got {max}"),
                });
            }
            col_max.push(max);
        }
        Self::new(col_max, epsilon)
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.col_max.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: self.col_max.len(),
            });
        }
        Ok(())
    }
}

fn check_nonnegative(m: &ScoreMatrix) -> Result<()> {
    for j in 0..m.n_benchmarks() {
        for i in 0..m.n_models() {
            if let Some(v) = m.get(i, j) {
                if v < 0.0 {
                    return Err(Error::InvalidColumn {
                        column: m.benchmark_names()[j].clone(),
                        message: format!(
                            "negative score {v} for model {:?} is not allowed in logit mode",
                            m.model_names()[i]
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

#[inline]
pub fn logit_value(score: f64, col_max: f64, epsilon: f64) -> f64 {
    let t = (score / col_max).clamp(epsilon, 1.0 - epsilon);
    (t / (1.0 - t)).ln()
}

#[inline]
pub fn logistic(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn inverse_logit_value(f: f64, col_max: f64) -> f64 {
    logistic(f) * col_max
}

/// `s -> log(t / (1 - t))` with `t = clamp(s / col_max_j, eps, 1 - eps)`.
pub fn logit_transform(m: &ScoreMatrix, params: &LogitParams) -> Result<ScoreMatrix> {
    params.check(m.n_benchmarks())?;
    check_nonnegative(m)?;
    Ok(m.map_observed(|j, v| logit_value(v, params.col_max[j], params.epsilon)))
}

/// `f -> logistic(f) * col_max_j`; predictions saturate at the training maximum.
pub fn inverse_logit(m: &ScoreMatrix, params: &LogitParams) -> Result<ScoreMatrix> {
    params.check(m.n_benchmarks())?;
    Ok(m.map_observed(|j, v| inverse_logit_value(v, params.col_max[j])))
}
