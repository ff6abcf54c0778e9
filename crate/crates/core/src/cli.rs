//! Command-line front end.
//!
//! Every command reads one score CSV, writes its tables under `--out`, and
//! embeds a [`RunManifest`] in each JSON it writes. Exit codes: 0 success,
//! 1 usage error, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::covariance::{estimate, to_correlation, EmConfig, EstimatorPolicy, GaussianModel};
use crate::diagnostics::{normality_report, Correction};
use crate::error::{Error, ErrorKind, Result};
use crate::evaluation::{
    compare_methods, run_cv_with_progress, write_benchmark_r2_csv, write_cells_csv, write_comparison_csv,
    write_summary_csv, CvConfig, Method,
};
use crate::imputation::{Conditioner, DEFAULT_RIDGE};
use crate::score_matrix::{
    inverse_logit_value, load_csv, load_csv_sparse, logistic, logit_transform, standardize, write_table, ColumnStats,
    LogitParams, ScoreMatrix, DEFAULT_LOGIT_EPSILON,
};
use crate::selection::{
    annotate_entropy, budgeted_entropy, default_shift, greedy_entropy, greedy_mi, lazy_greedy_entropy, random_select,
    spectrum, CostModel, SelectionResult,
};

const SPECTRUM_THRESHOLDS: [f64; 3] = [0.90, 0.95, 0.99];

#[derive(Parser, Debug)]
#[command(
    name = "benchsel",
    version,
    about = "Informative benchmark subset selection and score imputation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Eigenvalue spectrum of the benchmark correlation matrix.
    Spectrum(SpectrumArgs),
    /// Greedy benchmark selection.
    Select(SelectArgs),
    /// Fill missing scores from the selected benchmarks.
    Impute(ImputeArgs),
    /// Cross-validated comparison of selection methods.
    Cv(CvArgs),
    /// Per-benchmark Shapiro-Wilk and multivariate Mardia tests.
    Normality(NormalityArgs),
    /// Fit and save a Gaussian model for later imputation.
    Fit(FitArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Directory for all outputs (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Progress on stderr.
    #[arg(long)]
    verbose: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct LogitFlags {
    /// Work in logit space (scores scaled by the training column maximum).
    #[arg(long)]
    logit: bool,
    #[arg(long, default_value_t = DEFAULT_LOGIT_EPSILON)]
    logit_epsilon: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Auto,
    Full,
    Em,
}

impl From<EstimatorArg> for EstimatorPolicy {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Auto => EstimatorPolicy::Auto,
            EstimatorArg::Full => EstimatorPolicy::Full,
            EstimatorArg::Em => EstimatorPolicy::Em,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveArg {
    Entropy,
    Mi,
    Budgeted,
    Random,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScaleArg {
    /// z-score every column first.
    Standardized,
    /// Use the scores as they are.
    Raw,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CorrectionArg {
    Bh,
    Bonferroni,
    None,
}

impl From<CorrectionArg> for Correction {
    fn from(c: CorrectionArg) -> Self {
        match c {
            CorrectionArg::Bh => Correction::Bh,
            CorrectionArg::Bonferroni => Correction::Bonferroni,
            CorrectionArg::None => Correction::None,
        }
    }
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Auto)]
    estimator: EstimatorArg,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SelectArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Entropy)]
    objective: ObjectiveArg,
    /// Number of benchmarks to pick (not used by the budgeted objective).
    #[arg(long)]
    k: Option<usize>,
    /// CSV with columns `benchmark,cost`.
    #[arg(long)]
    costs: Option<PathBuf>,
    #[arg(long)]
    budget: Option<f64>,
    /// Constant added to each log-variance gain in the budgeted ratio.
    #[arg(long)]
    shift_c: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lazy evaluation of entropy gains (same result, fewer evaluations).
    #[arg(long)]
    lazy: bool,
    #[arg(long, value_enum, default_value_t = ScaleArg::Standardized)]
    scale: ScaleArg,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Auto)]
    estimator: EstimatorArg,
    #[command(flatten)]
    logit: LogitFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    /// Scores to complete; must have the same benchmark columns as the model.
    input: PathBuf,
    /// Model document written by `fit`.
    #[arg(long, conflicts_with = "train")]
    model: Option<PathBuf>,
    /// Training scores to fit the model on.
    #[arg(long, required_unless_present = "model")]
    train: Option<PathBuf>,
    /// Comma-separated benchmark names, or a file with one name per line.
    #[arg(long)]
    selected: String,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    /// Only with `--train`.
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    #[command(flatten)]
    logit: LogitFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CvArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Held-out fraction; repeat for several (default 0.1, 0.2, 0.5, 0.9).
    #[arg(long = "holdout")]
    holdout: Vec<f64>,
    #[arg(long, default_value_t = 15)]
    kmax: usize,
    #[arg(long, value_delimiter = ',', default_value = "entropy,mi,random")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Auto)]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[command(flatten)]
    logit: LogitFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct NormalityArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = CorrectionArg::Bh)]
    correction: CorrectionArg,
    /// Seed for subsampling columns longer than the test supports.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct FitArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Auto)]
    estimator: EstimatorArg,
    #[command(flatten)]
    logit: LogitFlags,
    #[command(flatten)]
    common: Common,
}

/// Provenance record embedded in every JSON output. Paths, thread counts and
/// verbosity are left out so that it depends only on what shapes the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// SHA-256 of the primary input CSV, hex.
    pub input_digest: String,
    /// Digests of secondary inputs (training data, model, costs) by role.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub other_inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: Value, input_digest: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            input_digest,
            other_inputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            warnings: Vec::new(),
        }
    }
}

/// Model saved by `fit` and read by `impute --model`. The Gaussian lives in
/// standardized space (logit-then-standardized when `logit` is present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub manifest: RunManifest,
    pub benchmarks: Vec<String>,
    pub stats: ColumnStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit: Option<LogitParams>,
    pub model: GaussianModel,
}

/// Parses `args` (program name first) and runs the command, writing to the
/// process stdout and stderr. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let code = match e.kind() {
                K::DisplayHelp | K::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(e.kind())
        }
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let common = match &command {
        Command::Spectrum(a) => &a.common,
        Command::Select(a) => &a.common,
        Command::Impute(a) => &a.common,
        Command::Cv(a) => &a.common,
        Command::Normality(a) => &a.common,
        Command::Fit(a) => &a.common,
    };
    let pool = match common.threads {
        Some(0) => return Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start thread pool: {e}")))?,
        None => rayon::ThreadPoolBuilder::new()
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start thread pool: {e}")))?,
    };
    fs::create_dir_all(&common.out)?;
    let mut printed = Vec::new();
    let written = pool.install(|| match &command {
        Command::Spectrum(a) => cmd_spectrum(a, &mut printed),
        Command::Select(a) => cmd_select(a, &mut printed),
        Command::Impute(a) => cmd_impute(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Normality(a) => cmd_normality(a),
        Command::Fit(a) => cmd_fit(a),
    })?;
    out.write_all(&printed)?;
    for w in &written.warnings {
        writeln!(err, "warning: {w}")?;
    }
    if common.verbose {
        for f in &written.files {
            writeln!(err, "wrote {}", f.display())?;
        }
    }
    Ok(())
}

struct Written {
    files: Vec<PathBuf>,
    warnings: Vec<String>,
}

struct Output<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        let path = self.dir.join(name);
        fs::write(&path, buf)?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, |buf| {
            serde_json::to_writer_pretty(&mut *buf, value)?;
            buf.push(b'\n');
            Ok(())
        })
    }

    fn done(self, warnings: Vec<String>) -> Written {
        Written {
            files: self.files,
            warnings,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_input(path: &Path) -> Result<(ScoreMatrix, String)> {
    let bytes = fs::read(path)?;
    let digest = sha256_hex(&bytes);
    Ok((load_csv(bytes.as_slice())?, digest))
}

/// Optional logit transform followed by optional z-scoring, with the
/// parameters needed to map back.
struct Space {
    data: ScoreMatrix,
    logit: Option<LogitParams>,
    stats: Option<ColumnStats>,
}

fn to_space(m: &ScoreMatrix, logit: &LogitFlags, standardized: bool, source: &str) -> Result<Space> {
    let (data, params) = if logit.logit {
        let p = LogitParams::from_matrix(m, logit.logit_epsilon)?;
        (logit_transform(m, &p)?, Some(p))
    } else {
        (m.clone(), None)
    };
    if !standardized {
        return Ok(Space {
            data,
            logit: params,
            stats: None,
        });
    }
    let stats = ColumnStats::from_matrix(&data, source)?;
    Ok(Space {
        data: standardize(&data, &stats)?,
        logit: params,
        stats: Some(stats),
    })
}

fn fit_model(m: &ScoreMatrix, estimator: EstimatorArg) -> Result<(GaussianModel, EmConfig, Vec<String>)> {
    let cfg = EmConfig::for_matrix(m);
    let model = estimate(m, estimator.into(), &cfg)?;
    let mut warnings = Vec::new();
    if !model.converged() {
        warnings.push(format!(
            "EM stopped after {} iterations without converging",
            model.em_iterations()
        ));
    }
    Ok((model, cfg, warnings))
}

fn em_config_json(cfg: &EmConfig) -> Value {
    json!({
        "max_iter": cfg.max_iter,
        "rel_tol": cfg.rel_tol,
        "ridge": cfg.ridge,
        "psd_floor": cfg.psd_floor,
        "shrink": cfg.shrink,
    })
}

fn logit_json(logit: &LogitFlags) -> Value {
    if logit.logit {
        json!({ "epsilon": logit.logit_epsilon })
    } else {
        Value::Null
    }
}

fn cmd_spectrum(a: &SpectrumArgs, stdout: &mut Vec<u8>) -> Result<Written> {
    let (m, digest) = read_input(&a.input)?;
    let space = to_space(
        &m,
        &LogitFlags {
            logit: false,
            logit_epsilon: DEFAULT_LOGIT_EPSILON,
        },
        true,
        "input",
    )?;
    let (model, em, warnings) = fit_model(&space.data, a.estimator)?;
    let report = spectrum(&to_correlation(model.cov())?)?;
    let thresholds: BTreeMap<String, Option<usize>> = SPECTRUM_THRESHOLDS
        .iter()
        .map(|&t| (format!("{t}"), report.components_for(t)))
        .collect();

    let mut manifest = RunManifest::new(
        "spectrum",
        json!({ "estimator": a.estimator, "fitted": model.estimator(), "em": em_config_json(&em) }),
        digest,
        0,
    );
    manifest.warnings = warnings.clone();

    let mut out = Output::new(&a.common.out);
    out.write("spectrum.csv", |w| {
        writeln!(w, "k,eigenvalue,explained,residual_fraction")?;
        for k in 0..report.eigenvalues.len() {
            writeln!(
                w,
                "{},{},{},{}",
                k + 1,
                report.eigenvalues[k],
                report.explained[k],
                report.residual_fraction[k]
            )?;
        }
        Ok(())
    })?;
    out.json(
        "spectrum.json",
        &json!({
            "manifest": manifest,
            "benchmarks": m.benchmark_names(),
            "components_for": thresholds,
            "spectrum": report,
        }),
    )?;
    for &t in &SPECTRUM_THRESHOLDS {
        let k = report
            .components_for(t)
            .map(|k| k.to_string())
            .unwrap_or_else(|| "-".into());
        writeln!(stdout, "k({}%)\t{k}", (t * 100.0).round())?;
    }
    Ok(out.done(warnings))
}

fn read_costs(path: &Path, names: &[String]) -> Result<(Vec<f64>, String)> {
    let bytes = fs::read(path)?;
    let digest = sha256_hex(&bytes);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut costs: Vec<Option<f64>> = vec![None; names.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedCsv {
            line: line + 2,
            message: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(Error::MalformedCsv {
                line: line + 2,
                message: format!("expected `benchmark,cost`, got {} fields", rec.len()),
            });
        }
        let name = &rec[0];
        let j = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownBenchmark(name.to_string()))?;
        let c: f64 = rec[1].parse().map_err(|_| Error::MalformedCsv {
            line: line + 2,
            message: format!("cost {:?} is not a number", &rec[1]),
        })?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidColumn {
                column: name.to_string(),
                message: format!("cost must be positive, got {c}"),
            });
        }
        if costs[j].replace(c).is_some() {
            return Err(Error::DuplicateName {
                what: "cost",
                name: name.to_string(),
            });
        }
    }
    let costs = costs
        .into_iter()
        .enumerate()
        .map(|(j, c)| {
            c.ok_or_else(|| Error::InvalidColumn {
                column: names[j].clone(),
                message: "no cost given".into(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((costs, digest))
}

fn cmd_select(a: &SelectArgs, stdout: &mut Vec<u8>) -> Result<Written> {
    let budgeted = a.objective == ObjectiveArg::Budgeted;
    match (a.costs.is_some(), a.budget.is_some()) {
        (false, true) => return Err(Error::InvalidArgument("--budget requires --costs".into())),
        (true, false) => return Err(Error::InvalidArgument("--costs requires --budget".into())),
        (false, false) if budgeted => {
            return Err(Error::InvalidArgument(
                "--objective budgeted requires --costs and --budget".into(),
            ))
        }
        (true, true) if !budgeted => {
            return Err(Error::InvalidArgument(
                "--costs/--budget only apply to --objective budgeted".into(),
            ))
        }
        _ => {}
    }
    if a.shift_c.is_some() && !budgeted {
        return Err(Error::InvalidArgument(
            "--shift-c only applies to --objective budgeted".into(),
        ));
    }
    if a.lazy && a.objective != ObjectiveArg::Entropy {
        return Err(Error::InvalidArgument(
            "--lazy only applies to --objective entropy".into(),
        ));
    }
    let k = match (budgeted, a.k) {
        (true, Some(_)) => {
            return Err(Error::InvalidArgument(
                "--k is not used with --objective budgeted".into(),
            ))
        }
        (true, None) => None,
        (false, None) => return Err(Error::InvalidArgument("--k is required".into())),
        (false, Some(k)) => Some(k),
    };

    let (m, digest) = read_input(&a.input)?;
    let space = to_space(&m, &a.logit, a.scale == ScaleArg::Standardized, "input")?;
    let (model, em, mut warnings) = fit_model(&space.data, a.estimator)?;
    let s = model.cov();

    let mut other_inputs = BTreeMap::new();
    let mut shift_used = None;
    let result: SelectionResult = match a.objective {
        ObjectiveArg::Entropy if a.lazy => lazy_greedy_entropy(s, k.unwrap_or(0))?,
        ObjectiveArg::Entropy => greedy_entropy(s, k.unwrap_or(0))?,
        ObjectiveArg::Mi => greedy_mi(s, k.unwrap_or(0))?,
        ObjectiveArg::Random => {
            let mut r = random_select(s.nrows(), k.unwrap_or(0), a.seed)?;
            annotate_entropy(s, &mut r)?;
            r
        }
        ObjectiveArg::Budgeted => {
            let path = a.costs.as_deref().unwrap_or(Path::new(""));
            let (costs, cost_digest) = read_costs(path, m.benchmark_names())?;
            other_inputs.insert("costs".to_string(), cost_digest);
            let mut cm = CostModel::new(s, costs, a.budget.unwrap_or(0.0));
            let shift = a.shift_c.unwrap_or_else(|| default_shift(s));
            cm.shift_c = shift;
            shift_used = Some(shift);
            budgeted_entropy(s, &cm)?
        }
    };
    warnings.extend(result.warnings.iter().cloned());
    let report = result.report(m.benchmark_names())?;

    let mut manifest = RunManifest::new(
        "select",
        json!({
            "objective": a.objective,
            "k": k,
            "budget": a.budget,
            "shift_c": shift_used,
            "lazy": a.lazy,
            "scale": a.scale,
            "estimator": a.estimator,
            "fitted": model.estimator(),
            "logit": logit_json(&a.logit),
            "em": em_config_json(&em),
        }),
        digest,
        a.seed,
    );
    manifest.other_inputs = other_inputs;
    manifest.warnings = warnings.clone();

    let mut out = Output::new(&a.common.out);
    out.write("selection.csv", |w| {
        writeln!(w, "rank,benchmark,index,gain,residual_trace")?;
        for (t, &j) in result.order.iter().enumerate() {
            let gain = result.gains.get(t).map(|g| g.to_string()).unwrap_or_default();
            let trace = result
                .residual_trace
                .get(t + 1)
                .map(|g| g.to_string())
                .unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", t + 1, m.benchmark_names()[j], j, gain, trace)?;
        }
        Ok(())
    })?;
    out.json("selection.json", &json!({ "manifest": manifest, "selection": report }))?;

    writeln!(stdout, "rank\tbenchmark\tgain\tresidual_trace")?;
    if let Some(t0) = result.residual_trace.first() {
        writeln!(stdout, "0\t-\t-\t{t0:.6}")?;
    }
    for (t, name) in report.selected.iter().enumerate() {
        let gain = result
            .gains
            .get(t)
            .map(|g| format!("{g:.6}"))
            .unwrap_or_else(|| "-".into());
        let trace = result
            .residual_trace
            .get(t + 1)
            .map(|g| format!("{g:.6}"))
            .unwrap_or_else(|| "-".into());
        writeln!(stdout, "{}\t{name}\t{gain}\t{trace}", t + 1)?;
    }
    Ok(out.done(warnings))
}

/// Benchmark names from a comma-separated list, or from a file when the
/// argument names one (one name per line, commas also accepted).
fn parse_selected(arg: &str) -> Result<(Vec<String>, Option<String>)> {
    let path = Path::new(arg);
    let (text, digest) = if path.is_file() {
        let bytes = fs::read(path)?;
        let digest = sha256_hex(&bytes);
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::InvalidArgument(format!("{arg}: selected-name file is not UTF-8")))?;
        (text, Some(digest))
    } else {
        (arg.to_string(), None)
    };
    let names: Vec<String> = text
        .split([',', '\n'])
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidArgument("--selected names no benchmarks".into()));
    }
    Ok((names, digest))
}

fn cmd_impute(a: &ImputeArgs) -> Result<Written> {
    if a.model.is_some() && a.estimator.is_some() {
        return Err(Error::InvalidArgument("--estimator only applies with --train".into()));
    }
    let bytes = fs::read(&a.input)?;
    let digest = sha256_hex(&bytes);
    let m = load_csv_sparse(bytes.as_slice())?;
    let mut other_inputs = BTreeMap::new();
    let mut warnings = Vec::new();

    let (benchmarks, stats, logit, model, fit_config) = if let Some(path) = &a.model {
        let bytes = fs::read(path)?;
        other_inputs.insert("model".to_string(), sha256_hex(&bytes));
        let doc: FitDocument = serde_json::from_slice(&bytes)?;
        if a.logit.logit && doc.logit.is_none() {
            return Err(Error::InvalidArgument(
                "--logit given but the model was fitted without it".into(),
            ));
        }
        if doc.model.dim() != doc.benchmarks.len() {
            return Err(Error::DimensionMismatch {
                expected: doc.benchmarks.len(),
                actual: doc.model.dim(),
            });
        }
        (doc.benchmarks, doc.stats, doc.logit, doc.model, Value::Null)
    } else {
        let path = a.train.as_deref().unwrap_or(Path::new(""));
        let (train, train_digest) = read_input(path)?;
        other_inputs.insert("train".to_string(), train_digest);
        let space = to_space(&train, &a.logit, true, "train")?;
        let estimator = a.estimator.unwrap_or(EstimatorArg::Auto);
        let (model, em, w) = fit_model(&space.data, estimator)?;
        warnings.extend(w);
        let cfg = json!({ "estimator": estimator, "fitted": model.estimator(), "em": em_config_json(&em) });
        let stats = space
            .stats
            .ok_or_else(|| Error::InvalidArgument("training data was not standardized".into()))?;
        (train.benchmark_names().to_vec(), stats, space.logit, model, cfg)
    };

    // Model column for each input column.
    let mut to_model = Vec::with_capacity(m.n_benchmarks());
    for name in m.benchmark_names() {
        to_model.push(
            benchmarks
                .iter()
                .position(|b| b == name)
                .ok_or_else(|| Error::UnknownBenchmark(name.clone()))?,
        );
    }
    if let Some(b) = benchmarks.iter().find(|b| m.benchmark_index(b).is_none()) {
        return Err(Error::InvalidColumn {
            column: b.clone(),
            message: "model benchmark missing from input".into(),
        });
    }
    let (selected_names, selected_digest) = parse_selected(&a.selected)?;
    if let Some(d) = selected_digest {
        other_inputs.insert("selected".to_string(), d);
    }
    let mut selected = Vec::new();
    for name in &selected_names {
        let j = benchmarks
            .iter()
            .position(|b| b == name)
            .ok_or_else(|| Error::UnknownBenchmark(name.clone()))?;
        if !selected.contains(&j) {
            selected.push(j);
        }
    }
    selected.sort_unstable();

    let n = benchmarks.len();
    let to_space_value = |jm: usize, v: f64| -> f64 {
        let f = match &logit {
            Some(p) => crate::score_matrix::logit_value(v, p.col_max[jm], p.epsilon),
            None => v,
        };
        (f - stats.means[jm]) / stats.stds[jm]
    };
    if logit.is_some() {
        if let Some((i, j)) = (0..m.n_models())
            .flat_map(|i| (0..m.n_benchmarks()).map(move |j| (i, j)))
            .find(|&(i, j)| m.get(i, j).is_some_and(|v| v < 0.0))
        {
            return Err(Error::InvalidColumn {
                column: m.benchmark_names()[j].clone(),
                message: format!(
                    "negative score for model {:?} is not allowed in logit mode",
                    m.model_names()[i]
                ),
            });
        }
    }

    let mut cache: BTreeMap<Vec<usize>, Conditioner> = BTreeMap::new();
    let mut completed = vec![None; m.n_models() * m.n_benchmarks()];
    let mut sd = vec![None; m.n_models() * m.n_benchmarks()];
    let mut n_imputed = 0usize;
    let mut unconditioned_rows = 0usize;
    for i in 0..m.n_models() {
        // Observed values in model column order.
        let mut row = vec![None; n];
        for (jin, &jm) in to_model.iter().enumerate() {
            row[jm] = m.get(i, jin).map(|v| to_space_value(jm, v));
        }
        let cond: Vec<usize> = selected.iter().copied().filter(|&j| row[j].is_some()).collect();
        let targets: Vec<usize> = (0..n).filter(|&j| row[j].is_none()).collect();
        if !targets.is_empty() && cond.is_empty() {
            unconditioned_rows += 1;
        }
        if !cache.contains_key(&cond) {
            cache.insert(cond.clone(), Conditioner::new(&model, cond.clone(), a.ridge)?);
        }
        let c = &cache[&cond];
        let values: Vec<f64> = cond.iter().map(|&j| row[j].unwrap_or(0.0)).collect();
        let pred = c.predict(&values, &targets);
        let var = c.cond_var(&targets);
        let mut filled: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for ((&jm, z), v) in targets.iter().zip(pred).zip(var) {
            let f = z * stats.stds[jm] + stats.means[jm];
            let sd_f = v.max(0.0).sqrt() * stats.stds[jm];
            let (raw, sd_raw) = match &logit {
                // Delta method through the logistic map.
                Some(p) => {
                    let s = logistic(f);
                    (
                        inverse_logit_value(f, p.col_max[jm]),
                        p.col_max[jm] * s * (1.0 - s) * sd_f,
                    )
                }
                None => (f, sd_f),
            };
            filled.insert(jm, (raw, sd_raw));
        }
        for (jin, &jm) in to_model.iter().enumerate() {
            let cell = i * m.n_benchmarks() + jin;
            match (m.get(i, jin), filled.get(&jm)) {
                (Some(v), _) => completed[cell] = Some(v),
                (None, Some(&(raw, s))) => {
                    completed[cell] = Some(raw);
                    sd[cell] = Some(s);
                    n_imputed += 1;
                }
                (None, None) => {}
            }
        }
    }
    if unconditioned_rows > 0 {
        warnings.push(format!(
            "{unconditioned_rows} rows have no observed selected benchmark; their missing cells are the training means"
        ));
    }

    let mut manifest = RunManifest::new(
        "impute",
        json!({
            "selected": selected.iter().map(|&j| &benchmarks[j]).collect::<Vec<_>>(),
            "ridge": a.ridge,
            "logit": logit.as_ref().map(|p| json!({ "epsilon": p.epsilon })),
            "fit": fit_config,
        }),
        digest,
        0,
    );
    manifest.other_inputs = other_inputs;
    manifest.warnings = warnings.clone();

    let nb = m.n_benchmarks();
    let mut out = Output::new(&a.common.out);
    out.write("imputed.csv", |w| {
        write_table(
            m.row_label(),
            m.model_names(),
            m.benchmark_names(),
            |i, j| completed[i * nb + j],
            w,
        )
    })?;
    out.write("imputed_sd.csv", |w| {
        write_table(
            m.row_label(),
            m.model_names(),
            m.benchmark_names(),
            |i, j| sd[i * nb + j],
            w,
        )
    })?;
    out.json(
        "impute.json",
        &json!({ "manifest": manifest, "imputed_cells": n_imputed, "rows": m.n_models() }),
    )?;
    Ok(out.done(warnings))
}

fn cmd_cv(a: &CvArgs) -> Result<Written> {
    let methods = a
        .methods
        .iter()
        .map(|s| Method::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let defaults = CvConfig::default();
    let cfg = CvConfig {
        folds: a.folds,
        holdout_fractions: if a.holdout.is_empty() {
            defaults.holdout_fractions.clone()
        } else {
            a.holdout.clone()
        },
        k_max: a.kmax,
        methods,
        seed: a.seed,
        estimator_policy: a.estimator.into(),
        ridge: a.ridge,
        logit_mode: a.logit.logit,
        logit_epsilon: a.logit.logit_epsilon,
        ..defaults
    };
    let (m, digest) = read_input(&a.input)?;
    let verbose = a.common.verbose;
    let report = run_cv_with_progress(&m, &cfg, |f| {
        if verbose {
            eprintln!("fold {} done", f + 1);
        }
    })?;
    let comparison = if cfg.methods.len() >= 2 {
        Some(compare_methods(&report)?)
    } else {
        None
    };

    let mut manifest = RunManifest::new("cv", serde_json::to_value(&cfg)?, digest, cfg.seed);
    manifest.warnings = report.warnings.clone();

    let mut out = Output::new(&a.common.out);
    out.write("cv_cells.csv", |w| write_cells_csv(&report, w))?;
    out.write("cv_benchmark_r2.csv", |w| write_benchmark_r2_csv(&report, w))?;
    out.write("cv_summary.csv", |w| write_summary_csv(&report, w))?;
    if let Some(rows) = &comparison {
        out.write("cv_comparison.csv", |w| write_comparison_csv(rows, w))?;
    }
    out.json(
        "cv_report.json",
        &json!({
            "manifest": manifest,
            "fold_sizes": report.fold_sizes,
            "summary": report.summary,
            "comparison": comparison,
            "selection_orders": report.selection_orders,
        }),
    )?;
    Ok(out.done(report.warnings))
}

fn cmd_normality(a: &NormalityArgs) -> Result<Written> {
    let (m, digest) = read_input(&a.input)?;
    let correction: Correction = a.correction.into();
    let report = normality_report(&m, a.alpha, correction, a.seed)?;
    let mut warnings = report.warnings.clone();
    warnings.extend(
        report
            .skipped
            .iter()
            .map(|s| format!("skipped {}: {}", s.benchmark, s.reason)),
    );

    let mut manifest = RunManifest::new(
        "normality",
        json!({ "alpha": a.alpha, "correction": correction }),
        digest,
        a.seed,
    );
    manifest.warnings = warnings.clone();

    let mut out = Output::new(&a.common.out);
    out.write("normality.csv", |w| {
        writeln!(w, "benchmark,n,subsampled,w,p,rejected")?;
        for r in &report.shapiro {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.benchmark, r.n, r.subsampled, r.w, r.p, r.rejected
            )?;
        }
        Ok(())
    })?;
    let rejected = report.shapiro.iter().filter(|r| r.rejected).count();
    out.json(
        "normality.json",
        &json!({
            "manifest": manifest,
            "tested": report.shapiro.len(),
            "rejected": rejected,
            "skipped": report.skipped,
            "mardia": report.mardia,
            "mardia_input": report.mardia_input,
        }),
    )?;
    Ok(out.done(warnings))
}

fn cmd_fit(a: &FitArgs) -> Result<Written> {
    let (m, digest) = read_input(&a.input)?;
    let space = to_space(&m, &a.logit, true, &format!("sha256:{digest}"))?;
    let (model, em, warnings) = fit_model(&space.data, a.estimator)?;
    let mut manifest = RunManifest::new(
        "fit",
        json!({
            "estimator": a.estimator,
            "fitted": model.estimator(),
            "logit": logit_json(&a.logit),
            "em": em_config_json(&em),
        }),
        digest,
        0,
    );
    manifest.warnings = warnings.clone();
    let names = m.benchmark_names().to_vec();
    let doc = FitDocument {
        manifest,
        benchmarks: names.clone(),
        stats: space
            .stats
            .ok_or_else(|| Error::InvalidArgument("fit data was not standardized".into()))?,
        logit: space.logit,
        model,
    };

    let mut out = Output::new(&a.common.out);
    let cov = doc.model.cov();
    out.write("covariance.csv", |w| {
        write_table("benchmark", &names, &names, |i, j| Some(cov[(i, j)]), w)
    })?;
    out.json("model.json", &doc)?;
    Ok(out.done(warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_capture(&["benchsel", "--help"]).0, 0);
        assert_eq!(run_capture(&["benchsel", "--version"]).0, 0);
        assert_eq!(run_capture(&["benchsel", "select", "--help"]).0, 0);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run_capture(&["benchsel", "select", "x.csv", "--bogus", "--out", "o"]);
        assert_eq!(code, 1);
        assert!(!err.is_empty());
    }

    #[test]
    fn missing_subcommand_is_usage_error() {
        assert_eq!(run_capture(&["benchsel"]).0, 1);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(Error::InvalidArgument("x".into()).kind()), 1);
        assert_eq!(exit_code(Error::UnknownBenchmark("x".into()).kind()), 2);
        assert_eq!(exit_code(Error::NotPsd(-1.0).kind()), 3);
    }

    #[test]
    fn parse_selected_list() {
        let (names, digest) = parse_selected(" a, b ,,c").unwrap();
        assert_eq!(names, ["a", "b", "c"]);
        assert!(digest.is_none());
        assert!(parse_selected(" , ").is_err());
    }

    #[test]
    fn parse_selected_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sel.txt");
        fs::write(&p, "gsm8k\nmmlu\n\n").unwrap();
        let (names, digest) = parse_selected(p.to_str().unwrap()).unwrap();
        assert_eq!(names, ["gsm8k", "mmlu"]);
        assert_eq!(digest.unwrap().len(), 64);
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
