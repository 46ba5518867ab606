//! Command-line surface: `estimate` on user data, `simulate` for the Monte
//! Carlo harness, `compare-derivative` for the derivative-estimator study.
//!
//! Every command writes a human-readable aligned table (`<out>.txt`) and a
//! machine-readable twin (`<out>.json` or `<out>.csv`). All randomness flows
//! from a single seed; a missing seed is drawn once and logged. Flags given
//! on the command line override values from an optional flat key=value
//! config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cdf_tools::{GridInterp, IntervalU};
use crate::dataset::{empirical_quantile, Dataset};
use crate::error::{OasdError, Result};
use crate::estimator::{
    fit_nuisances, EstimatorKind, NuisanceSettings, OasdEstimate,
};
use crate::inference::{run_bootstrap, BootstrapConfig, WeightLaw};
use crate::lasso_logit::DistRegConfig;
use crate::riesz::RieszConfig;
use crate::simulation::{
    decile_bands, run_derivative_comparison, run_main_mc, DerivativeComparisonSettings,
    MainDgpConfig, McSettings, SparsityDesign,
};

#[derive(Debug, Parser)]
#[command(
    name = "oasd",
    about = "Outcome-conditioned average structural derivative estimation",
    version
)]
pub struct CliArgs {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate interval effects on a delimited data file.
    Estimate(EstimateArgs),
    /// Reproduce the main Monte Carlo design.
    Simulate(SimulateArgs),
    /// Compare the two CDF-derivative estimators on the partial-linear designs.
    CompareDerivative(CompareArgs),
}

#[derive(Debug, Args, Clone)]
pub struct EstimateArgs {
    /// Delimited text file with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Outcome column name.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Treatment column name.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated covariate columns; default: every remaining column.
    #[arg(long)]
    pub covariates: Option<String>,
    /// Comma-separated interval pairs, absolute ("0.5:1.5") or quantile
    /// ("q0.05:q0.15").
    #[arg(long)]
    pub intervals: Option<String>,
    #[arg(long)]
    pub degree: Option<u32>,
    #[arg(long)]
    pub ell: Option<usize>,
    /// Riemann steps of the CDF integral.
    #[arg(long = "J")]
    pub steps: Option<usize>,
    /// Bootstrap draws.
    #[arg(long = "B")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// adml, naive or both.
    #[arg(long)]
    pub estimator: Option<String>,
    /// csv or json.
    #[arg(long)]
    pub format: Option<String>,
    /// Outcome-grid quantile points (19 = ventiles).
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// step or linear interpolation of the linear index between grid points.
    #[arg(long)]
    pub interp: Option<String>,
    /// Penalty-loading iterations.
    #[arg(long)]
    pub q_star: Option<usize>,
    /// Multiplier law: gaussian, rademacher or mammen.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Flat key=value config file; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path prefix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SimulateArgs {
    /// Design name; only "main" is available.
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub rd2: Option<f64>,
    #[arg(long)]
    pub ry2: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub oracle_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ell: Option<usize>,
    #[arg(long = "J")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub q_star: Option<usize>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct CompareArgs {
    /// 1, 2 or 3.
    #[arg(long)]
    pub dgp: Option<u8>,
    /// i, ii, iii or iv.
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Comma-separated quantile levels.
    #[arg(long)]
    pub taus: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flat key=value config file: one pair per line, `#` comments, keys must
/// belong to the allowed set of the command.
pub fn read_config_file(path: &Path, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            OasdError::Config(format!(
                "config line {} is not key=value: {raw:?}",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        if !allowed.contains(&key.as_str()) {
            return Err(OasdError::Config(format!(
                "unknown config key {key:?} (line {})",
                lineno + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn merge<T: FromStr + Clone>(
    cli: Option<T>,
    file: Option<&String>,
    key: &str,
    default: Option<T>,
) -> Result<T> {
    if let Some(v) = cli {
        return Ok(v);
    }
    if let Some(raw) = file {
        return raw.parse::<T>().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for {key}"))
        });
    }
    default.ok_or_else(|| OasdError::Config(format!("missing required option --{key}")))
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("no seed given; selected seed {s}");
            s
        }
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        // ignore failure: the global pool may already exist
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

/// One endpoint of a requested interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Endpoint {
    Absolute(f64),
    Quantile(f64),
}

impl Endpoint {
    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(q) = s.strip_prefix('q') {
            let tau: f64 = q
                .parse()
                .map_err(|_| OasdError::Config(format!("bad quantile endpoint {s:?}")))?;
            if !(0.0..=1.0).contains(&tau) {
                return Err(OasdError::Config(format!(
                    "quantile endpoint {tau} outside [0, 1]"
                )));
            }
            Ok(Endpoint::Quantile(tau))
        } else {
            let v: f64 = s
                .parse()
                .map_err(|_| OasdError::Config(format!("bad interval endpoint {s:?}")))?;
            Ok(Endpoint::Absolute(v))
        }
    }

    fn resolve(&self, sorted_y: &[f64]) -> f64 {
        match *self {
            Endpoint::Absolute(v) => v,
            Endpoint::Quantile(t) => empirical_quantile(sorted_y, t),
        }
    }
}

/// Parses "a:b,c:d,..." into endpoint pairs.
pub fn parse_intervals(spec: &str) -> Result<Vec<(Endpoint, Endpoint)>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (a, b) = part.split_once(':').ok_or_else(|| {
            OasdError::Config(format!("interval {part:?} is not of the form a:b"))
        })?;
        out.push((Endpoint::parse(a)?, Endpoint::parse(b)?));
    }
    if out.is_empty() {
        return Err(OasdError::Config("no intervals given".into()));
    }
    Ok(out)
}

/// Loads a delimited dataset with a header row. `covariates = None` takes
/// every column that is neither the outcome nor the treatment.
pub fn load_dataset(
    path: &Path,
    outcome: &str,
    treatment: &str,
    covariates: Option<&[String]>,
) -> Result<(Dataset, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| OasdError::MissingColumn(name.to_string()))
    };
    let y_idx = find(outcome)?;
    let d_idx = find(treatment)?;
    let x_idx: Vec<usize> = match covariates {
        Some(names) => names
            .iter()
            .map(|n| find(n))
            .collect::<Result<Vec<usize>>>()?,
        None => (0..headers.len())
            .filter(|&i| i != y_idx && i != d_idx)
            .collect(),
    };
    if x_idx.is_empty() {
        return Err(OasdError::Config(
            "no covariate columns left after outcome and treatment".into(),
        ));
    }
    let x_names: Vec<String> = x_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x_flat = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let parse_cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| OasdError::BadCell {
                row: row_idx + 1,
                column: headers[col].clone(),
                value: raw.to_string(),
            })
        };
        y.push(parse_cell(y_idx)?);
        d.push(parse_cell(d_idx)?);
        for &c in &x_idx {
            x_flat.push(parse_cell(c)?);
        }
    }
    let n = y.len();
    if n < 50 {
        eprintln!("warning: only {n} observations; estimates will be unstable");
    }
    let x = Array2::from_shape_vec((n, x_idx.len()), x_flat)
        .map_err(|e| OasdError::Config(format!("shape error: {e}")))?;
    let data = Dataset::new(Array1::from_vec(y), Array1::from_vec(d), x)?;
    eprintln!(
        "loaded {} rows: outcome {outcome:?}, treatment {treatment:?}, {} covariates",
        data.n(),
        data.n_covariates()
    );
    Ok((data, x_names))
}

/// One row of the estimate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimator: String,
    pub y1: f64,
    pub y2: f64,
    pub requested: String,
    pub theta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub band_lo: Option<f64>,
    pub band_hi: Option<f64>,
    pub p_hat: f64,
    pub n_in_interval: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalError {
    pub requested: String,
    pub y1: f64,
    pub y2: f64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomogeneityOut {
    pub estimator: String,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDiagnostic {
    pub y: f64,
    pub usable: bool,
    pub support_size: usize,
    pub loading_iterations: usize,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub command: String,
    pub seed: u64,
    pub alpha: f64,
    pub bootstrap_draws: usize,
    pub lambda: f64,
    pub riesz_lambda: f64,
    pub riesz_support_size: usize,
    pub rows: Vec<EstimateRow>,
    pub errors: Vec<IntervalError>,
    pub homogeneity: Vec<HomogeneityOut>,
    pub grid: Vec<GridDiagnostic>,
    pub warnings: Vec<String>,
}

fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            if cell.len() > widths[i] {
                widths[i] = cell.len();
            }
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize], out: &mut String| {
        for (i, cell) in cells.iter().enumerate() {
            let _ = write!(out, "{:>width$}  ", cell, width = widths[i]);
        }
        out.push('\n');
    };
    fmt_row(
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
        &widths,
        &mut out,
    );
    let total: usize = widths.iter().sum::<usize>() + 2 * widths.len();
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        fmt_row(row, &widths, &mut out);
    }
    out
}

fn opt_num(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".into(),
    }
}

/// Output format of the machine-readable twin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = OasdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(OasdError::Config(format!(
                "unknown format {other:?}; expected csv or json"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WhichEstimator {
    Adml,
    Naive,
    Both,
}

impl FromStr for WhichEstimator {
    type Err = OasdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adml" => Ok(WhichEstimator::Adml),
            "naive" => Ok(WhichEstimator::Naive),
            "both" => Ok(WhichEstimator::Both),
            other => Err(OasdError::Config(format!(
                "unknown estimator {other:?}; expected adml, naive or both"
            ))),
        }
    }
}

impl WhichEstimator {
    fn kinds(&self) -> Vec<EstimatorKind> {
        match self {
            WhichEstimator::Adml => vec![EstimatorKind::Adml],
            WhichEstimator::Naive => vec![EstimatorKind::Naive],
            WhichEstimator::Both => vec![EstimatorKind::Adml, EstimatorKind::Naive],
        }
    }
}

fn parse_interp(s: &str) -> Result<GridInterp> {
    match s.to_ascii_lowercase().as_str() {
        "step" => Ok(GridInterp::Step),
        "linear" => Ok(GridInterp::Linear),
        other => Err(OasdError::Config(format!(
            "unknown interpolation {other:?}; expected step or linear"
        ))),
    }
}

const ESTIMATE_KEYS: &[&str] = &[
    "input",
    "outcome",
    "treatment",
    "covariates",
    "intervals",
    "degree",
    "ell",
    "J",
    "B",
    "alpha",
    "seed",
    "estimator",
    "format",
    "grid_points",
    "interp",
    "q_star",
    "weights",
    "threads",
    "out",
];

/// Runs the `estimate` command end to end; returns the report it wrote.
pub fn run_estimate(args: &EstimateArgs) -> Result<EstimateReport> {
    let file = match &args.config {
        Some(p) => read_config_file(p, ESTIMATE_KEYS)?,
        None => BTreeMap::new(),
    };
    let get = |k: &str| file.get(k);

    let input: PathBuf = merge(args.input.clone(), get("input"), "input", None)?;
    let outcome: String = merge(args.outcome.clone(), get("outcome"), "outcome", Some("y".into()))?;
    let treatment: String = merge(
        args.treatment.clone(),
        get("treatment"),
        "treatment",
        Some("d".into()),
    )?;
    let covariates: Option<Vec<String>> = match merge(
        args.covariates.clone(),
        get("covariates"),
        "covariates",
        Some(String::new()),
    )? {
        s if s.is_empty() => None,
        s => Some(s.split(',').map(|v| v.trim().to_string()).collect()),
    };
    let intervals_raw: String =
        merge(args.intervals.clone(), get("intervals"), "intervals", None)?;
    let degree: u32 = merge(args.degree, get("degree"), "degree", Some(2))?;
    let ell: usize = merge(args.ell, get("ell"), "ell", Some(1))?;
    let steps: usize = merge(args.steps, get("J"), "J", Some(100))?;
    let draws: usize = merge(args.draws, get("B"), "B", Some(1000))?;
    let alpha: f64 = merge(args.alpha, get("alpha"), "alpha", Some(0.05))?;
    let estimator: WhichEstimator = merge(
        args.estimator.as_deref().map(|s| s.parse()).transpose()?,
        get("estimator"),
        "estimator",
        Some(WhichEstimator::Both),
    )?;
    let format: OutputFormat = merge(
        args.format.as_deref().map(|s| s.parse()).transpose()?,
        get("format"),
        "format",
        Some(OutputFormat::Json),
    )?;
    let grid_points: usize = merge(args.grid_points, get("grid_points"), "grid_points", Some(19))?;
    let interp = parse_interp(&merge(
        args.interp.clone(),
        get("interp"),
        "interp",
        Some("step".into()),
    )?)?;
    let q_star: usize = merge(args.q_star, get("q_star"), "q_star", Some(15))?;
    let weights: WeightLaw = merge(
        args.weights.as_deref().map(|s| s.parse()).transpose()?,
        get("weights"),
        "weights",
        Some(WeightLaw::Gaussian),
    )?;
    let threads: Option<usize> = match (args.threads, get("threads")) {
        (Some(t), _) => Some(t),
        (None, Some(raw)) => Some(raw.parse().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for threads"))
        })?),
        _ => None,
    };
    let out: PathBuf = merge(args.out.clone(), get("out"), "out", None)?;
    let seed = resolve_seed(match (args.seed, get("seed")) {
        (Some(s), _) => Some(s),
        (None, Some(raw)) => Some(raw.parse().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for seed"))
        })?),
        _ => None,
    });
    init_threads(threads);

    if !(0.0 < alpha && alpha < 0.5) {
        return Err(OasdError::Config(format!(
            "alpha must be in (0, 0.5), got {alpha}"
        )));
    }

    let (data, _x_names) = load_dataset(&input, &outcome, &treatment, covariates.as_deref())?;
    let endpoint_pairs = parse_intervals(&intervals_raw)?;
    let sorted = data.sorted_y();
    let mut intervals: Vec<(String, IntervalU)> = Vec::new();
    let requested_raw: Vec<String> = intervals_raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().to_string())
        .collect();
    for (raw, (a, b)) in requested_raw.iter().zip(endpoint_pairs.iter()) {
        let u = IntervalU::new(a.resolve(&sorted), b.resolve(&sorted))?;
        intervals.push((raw.clone(), u));
    }

    let mut settings = NuisanceSettings {
        degree,
        ell,
        steps,
        interp,
        grid_points,
        bandwidth: None,
        dist_reg: DistRegConfig {
            q_star,
            ..DistRegConfig::default()
        },
        riesz: RieszConfig::default(),
    };
    settings.dist_reg.q_star = q_star;
    let endpoints: Vec<f64> = intervals.iter().flat_map(|(_, u)| [u.y1, u.y2]).collect();
    let fitted = fit_nuisances(&data, &settings, &endpoints)?;
    let computer = fitted.score_computer(&data)?;

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut homog = Vec::new();
    let mut warnings = Vec::new();
    for kind in estimator.kinds() {
        let mut estimates: Vec<OasdEstimate> = Vec::new();
        let mut kept: Vec<String> = Vec::new();
        for (raw, u) in &intervals {
            match computer.estimate(u, kind) {
                Ok(e) => {
                    estimates.push(e);
                    kept.push(raw.clone());
                }
                Err(e) => {
                    if kind == estimator.kinds()[0] {
                        errors.push(IntervalError {
                            requested: raw.clone(),
                            y1: u.y1,
                            y2: u.y2,
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        if estimates.is_empty() {
            continue;
        }
        let boot = run_bootstrap(
            &estimates,
            &BootstrapConfig {
                draws,
                seed,
                law: weights,
                alpha,
            },
        )?;
        warnings.extend(boot.warnings.iter().cloned());
        let z = crate::math::normal_quantile(1.0 - alpha / 2.0);
        for (j, est) in estimates.iter().enumerate() {
            let band = boot.bands.uniform[j];
            rows.push(EstimateRow {
                estimator: kind.to_string(),
                y1: est.u.y1,
                y2: est.u.y2,
                requested: kept[j].clone(),
                theta: est.theta,
                se: est.se,
                ci_lo: est.theta - z * est.se,
                ci_hi: est.theta + z * est.se,
                band_lo: band.map(|b| b.0),
                band_hi: band.map(|b| b.1),
                p_hat: est.p_hat,
                n_in_interval: est.n_in_interval,
            });
        }
        if let Some((stat, p)) = boot.homogeneity {
            homog.push(HomogeneityOut {
                estimator: kind.to_string(),
                statistic: stat,
                p_value: p,
            });
        }
    }

    let grid = fitted
        .dist_fit
        .points
        .iter()
        .map(|pt| GridDiagnostic {
            y: pt.y,
            usable: pt.usable,
            support_size: pt.support.len(),
            loading_iterations: pt.iterations_used,
            reason: pt.reason.clone(),
        })
        .collect();

    let report = EstimateReport {
        command: "estimate".into(),
        seed,
        alpha,
        bootstrap_draws: draws,
        lambda: fitted.dist_fit.lambda,
        riesz_lambda: fitted.riesz_fit.lambda_tilde,
        riesz_support_size: fitted.riesz_fit.support().len(),
        rows,
        errors,
        homogeneity: homog,
        grid,
        warnings,
    };
    write_estimate_outputs(&report, &out, format)?;
    Ok(report)
}

fn write_estimate_outputs(
    report: &EstimateReport,
    out: &Path,
    format: OutputFormat,
) -> Result<()> {
    // human table
    let mut txt = String::new();
    let _ = writeln!(txt, "oasd estimate (seed {})", report.seed);
    let _ = writeln!(
        txt,
        "lasso penalty {:.6}; riesz penalty {:.6}; riesz support {}",
        report.lambda, report.riesz_lambda, report.riesz_support_size
    );
    txt.push('\n');
    let headers = [
        "estimator",
        "interval",
        "y1",
        "y2",
        "theta",
        "se",
        "ci_lo",
        "ci_hi",
        "band_lo",
        "band_hi",
        "p_hat",
        "n_in",
    ];
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.estimator.clone(),
                r.requested.clone(),
                format!("{:.6}", r.y1),
                format!("{:.6}", r.y2),
                format!("{:.6}", r.theta),
                format!("{:.6}", r.se),
                format!("{:.6}", r.ci_lo),
                format!("{:.6}", r.ci_hi),
                opt_num(r.band_lo),
                opt_num(r.band_hi),
                format!("{:.4}", r.p_hat),
                r.n_in_interval.to_string(),
            ]
        })
        .collect();
    txt.push_str(&aligned_table(&headers, &rows));
    if !report.homogeneity.is_empty() {
        txt.push('\n');
        for h in &report.homogeneity {
            let _ = writeln!(
                txt,
                "homogeneity ({}): statistic {:.6}, p-value {:.4}",
                h.estimator, h.statistic, h.p_value
            );
        }
    }
    if !report.errors.is_empty() {
        txt.push('\n');
        for e in &report.errors {
            let _ = writeln!(txt, "skipped {} ({:.4}, {:.4}): {}", e.requested, e.y1, e.y2, e.error);
        }
    }
    if !report.warnings.is_empty() {
        txt.push('\n');
        for w in &report.warnings {
            let _ = writeln!(txt, "warning: {w}");
        }
    }
    std::fs::write(out.with_extension("txt"), txt)?;

    match format {
        OutputFormat::Json => {
            let json = serde_json::to_string_pretty(report)?;
            std::fs::write(out.with_extension("json"), json + "\n")?;
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_path(out.with_extension("csv"))?;
            w.write_record([
                "estimator",
                "requested",
                "y1",
                "y2",
                "theta",
                "se",
                "ci_lo",
                "ci_hi",
                "band_lo",
                "band_hi",
                "p_hat",
                "n_in_interval",
            ])
            .map_err(OasdError::from)?;
            for r in &report.rows {
                w.write_record([
                    r.estimator.clone(),
                    r.requested.clone(),
                    r.y1.to_string(),
                    r.y2.to_string(),
                    r.theta.to_string(),
                    r.se.to_string(),
                    r.ci_lo.to_string(),
                    r.ci_hi.to_string(),
                    r.band_lo.map(|v| v.to_string()).unwrap_or_default(),
                    r.band_hi.map(|v| v.to_string()).unwrap_or_default(),
                    r.p_hat.to_string(),
                    r.n_in_interval.to_string(),
                ])
                .map_err(OasdError::from)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

const SIMULATE_KEYS: &[&str] = &[
    "design", "rd2", "ry2", "n", "k", "reps", "oracle_n", "seed", "ell", "J", "q_star",
    "format", "threads", "out",
];

/// Runs the `simulate` command; returns the report.
pub fn run_simulate(args: &SimulateArgs) -> Result<crate::simulation::McReport> {
    let file = match &args.config {
        Some(p) => read_config_file(p, SIMULATE_KEYS)?,
        None => BTreeMap::new(),
    };
    let get = |k: &str| file.get(k);
    let design: String = merge(args.design.clone(), get("design"), "design", Some("main".into()))?;
    if design != "main" {
        return Err(OasdError::Config(format!(
            "unknown design {design:?}; only \"main\" is available"
        )));
    }
    let rd2: f64 = merge(args.rd2, get("rd2"), "rd2", Some(0.1))?;
    let ry2: f64 = merge(args.ry2, get("ry2"), "ry2", Some(0.1))?;
    let n: usize = merge(args.n, get("n"), "n", Some(500))?;
    let k: usize = merge(args.k, get("k"), "k", Some(30))?;
    let reps: usize = merge(args.reps, get("reps"), "reps", Some(100))?;
    let oracle_n: usize = merge(args.oracle_n, get("oracle_n"), "oracle_n", Some(1_000_000))?;
    let ell: usize = merge(args.ell, get("ell"), "ell", Some(1))?;
    let steps: usize = merge(args.steps, get("J"), "J", Some(100))?;
    let q_star: usize = merge(args.q_star, get("q_star"), "q_star", Some(15))?;
    let format: OutputFormat = merge(
        args.format.as_deref().map(|s| s.parse()).transpose()?,
        get("format"),
        "format",
        Some(OutputFormat::Json),
    )?;
    let threads: Option<usize> = match (args.threads, get("threads")) {
        (Some(t), _) => Some(t),
        (None, Some(raw)) => Some(raw.parse().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for threads"))
        })?),
        _ => None,
    };
    let out: PathBuf = merge(args.out.clone(), get("out"), "out", None)?;
    let seed = resolve_seed(match (args.seed, get("seed")) {
        (Some(s), _) => Some(s),
        (None, Some(raw)) => Some(raw.parse().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for seed"))
        })?),
        _ => None,
    });
    init_threads(threads);

    // config validation happens before any sampling
    let cfg = MainDgpConfig::new(n, k, rd2, ry2, seed)?;
    let settings = McSettings {
        reps,
        oracle_n,
        nuisance: NuisanceSettings {
            ell,
            steps,
            dist_reg: DistRegConfig {
                q_star,
                ..DistRegConfig::default()
            },
            ..NuisanceSettings::default()
        },
        alpha: 0.05,
    };
    let report = run_main_mc(&cfg, &decile_bands(), &settings)?;
    eprintln!(
        "simulate finished in {:.1}s ({} reps)",
        report.runtime_secs, report.reps
    );
    write_mc_outputs(&report, &out, format)?;
    Ok(report)
}

fn write_mc_outputs(
    report: &crate::simulation::McReport,
    out: &Path,
    format: OutputFormat,
) -> Result<()> {
    let mut txt = String::new();
    let _ = writeln!(
        txt,
        "oasd simulate: n = {}, K = {}, R_d² = {}, R_y² = {}, seed = {}, reps = {}",
        report.n, report.k, report.r_d_sq, report.r_y_sq, report.seed, report.reps
    );
    txt.push('\n');
    let headers = [
        "band", "estimator", "theta_true", "bias_ratio", "std", "mse", "coverage", "reps", "fail",
    ];
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            let b_idx = report.bands.iter().position(|b| *b == c.band).unwrap();
            vec![
                format!("{:.0}%-{:.0}%", c.band.0 * 100.0, c.band.1 * 100.0),
                c.estimator.clone(),
                format!("{:.4}", report.theta_true[b_idx]),
                format!("{:.4}", c.bias_ratio),
                format!("{:.4}", c.std),
                format!("{:.4}", c.mse),
                format!("{:.4}", c.coverage),
                c.reps_used.to_string(),
                c.failures.to_string(),
            ]
        })
        .collect();
    txt.push_str(&aligned_table(&headers, &rows));
    for w in &report.warnings {
        let _ = writeln!(txt, "warning: {w}");
    }
    std::fs::write(out.with_extension("txt"), txt)?;
    match format {
        OutputFormat::Json => {
            let json = serde_json::to_string_pretty(report)?;
            std::fs::write(out.with_extension("json"), json + "\n")?;
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_path(out.with_extension("csv"))?;
            w.write_record([
                "tau1",
                "tau2",
                "estimator",
                "theta_true",
                "bias_ratio",
                "std",
                "mse",
                "coverage",
                "reps_used",
                "failures",
            ])
            .map_err(OasdError::from)?;
            for c in &report.cells {
                let b_idx = report.bands.iter().position(|b| *b == c.band).unwrap();
                w.write_record([
                    c.band.0.to_string(),
                    c.band.1.to_string(),
                    c.estimator.clone(),
                    report.theta_true[b_idx].to_string(),
                    c.bias_ratio.to_string(),
                    c.std.to_string(),
                    c.mse.to_string(),
                    c.coverage.to_string(),
                    c.reps_used.to_string(),
                    c.failures.to_string(),
                ])
                .map_err(OasdError::from)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

const COMPARE_KEYS: &[&str] = &[
    "dgp", "design", "reps", "n", "p", "taus", "seed", "format", "threads", "out",
];

/// Runs the `compare-derivative` command; returns the report.
pub fn run_compare_derivative(args: &CompareArgs) -> Result<crate::simulation::DerivativeReport> {
    let file = match &args.config {
        Some(p) => read_config_file(p, COMPARE_KEYS)?,
        None => BTreeMap::new(),
    };
    let get = |k: &str| file.get(k);
    let dgp: u8 = merge(args.dgp, get("dgp"), "dgp", Some(1))?;
    let design: SparsityDesign = merge(
        args.design.as_deref().map(|s| s.parse()).transpose()?,
        get("design"),
        "design",
        Some(SparsityDesign::I),
    )?;
    let reps: usize = merge(args.reps, get("reps"), "reps", Some(50))?;
    let n: usize = merge(args.n, get("n"), "n", Some(500))?;
    let p: usize = merge(args.p, get("p"), "p", Some(99))?;
    let taus: Vec<f64> = match merge(
        args.taus.clone(),
        get("taus"),
        "taus",
        Some(String::new()),
    )? {
        s if s.is_empty() => (1..=9).map(|j| j as f64 / 10.0).collect(),
        s => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| OasdError::Config(format!("bad tau {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    let format: OutputFormat = merge(
        args.format.as_deref().map(|s| s.parse()).transpose()?,
        get("format"),
        "format",
        Some(OutputFormat::Json),
    )?;
    let threads: Option<usize> = match (args.threads, get("threads")) {
        (Some(t), _) => Some(t),
        (None, Some(raw)) => Some(raw.parse().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for threads"))
        })?),
        _ => None,
    };
    let out: PathBuf = merge(args.out.clone(), get("out"), "out", None)?;
    let seed = resolve_seed(match (args.seed, get("seed")) {
        (Some(s), _) => Some(s),
        (None, Some(raw)) => Some(raw.parse().map_err(|_| {
            OasdError::Config(format!("could not parse config value {raw:?} for seed"))
        })?),
        _ => None,
    });
    init_threads(threads);

    let settings = DerivativeComparisonSettings {
        n,
        p,
        reps,
        seed,
        taus,
        dist_reg: DistRegConfig::default(),
    };
    let report = run_derivative_comparison(dgp, design, &settings)?;
    eprintln!(
        "compare-derivative finished in {:.1}s ({} reps)",
        report.runtime_secs, report.reps
    );
    write_derivative_outputs(&report, &out, format)?;
    Ok(report)
}

fn write_derivative_outputs(
    report: &crate::simulation::DerivativeReport,
    out: &Path,
    format: OutputFormat,
) -> Result<()> {
    let mut txt = String::new();
    let _ = writeln!(
        txt,
        "oasd compare-derivative: DGP {}, design {}, n = {}, p = {}, reps = {}, seed = {}",
        report.dgp_id, report.design, report.n, report.p, report.reps, report.seed
    );
    txt.push('\n');
    let headers = ["tau", "partial_difference", "direct"];
    let rows: Vec<Vec<String>> = report
        .taus
        .iter()
        .enumerate()
        .map(|(i, t)| {
            vec![
                format!("{t:.2}"),
                format!("{:.6}", report.mean_dist_partial[i]),
                format!("{:.6}", report.mean_dist_direct[i]),
            ]
        })
        .collect();
    txt.push_str(&aligned_table(&headers, &rows));
    std::fs::write(out.with_extension("txt"), txt)?;
    match format {
        OutputFormat::Json => {
            let json = serde_json::to_string_pretty(report)?;
            std::fs::write(out.with_extension("json"), json + "\n")?;
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_path(out.with_extension("csv"))?;
            w.write_record(["tau", "mean_dist_partial", "mean_dist_direct"])
                .map_err(OasdError::from)?;
            for (i, t) in report.taus.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    report.mean_dist_partial[i].to_string(),
                    report.mean_dist_direct[i].to_string(),
                ])
                .map_err(OasdError::from)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Entry point used by the binary. Maps configuration errors to exit code 2
/// and runtime failures to 1.
pub fn run(args: CliArgs) -> i32 {
    let result: Result<()> = match args.command {
        Command::Estimate(a) => run_estimate(&a).map(|_| ()),
        Command::Simulate(a) => run_simulate(&a).map(|_| ()),
        Command::CompareDerivative(a) => run_compare_derivative(&a).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                OasdError::Config(_)
                | OasdError::MissingColumn(_)
                | OasdError::BadCell { .. } => 2,
                _ => 1,
            }
        }
    }
}
