//! The `rainbow-density` command line: `price`, `recover` and `validate`.
//!
//! Exit codes: 0 success, 2 configuration, 3 numerical failure, 4 law not
//! absolutely continuous, 5 failed validation checks.

pub mod checks;
pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::payoffs::{PNorm, StrikeSpec};
use crate::pricers::{price, PricerConfig, PricerError};
use crate::recovery::{
    recover_density_cdf, recover_density_cp, recover_density_main, recover_density_n2_alternative, FormulaTag,
    RecoveryError, RecoveryReport,
};
use checks::{run_checks, CheckResult, CheckStatus};
use config::Experiment;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// The one environment override: the output directory.
pub const OUT_DIR_ENV: &str = "RAINBOW_DENSITY_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("law is not absolutely continuous: {0}")]
    NotAbsolutelyContinuous(String),
    #[error("validation failed: {}", .0.join(", "))]
    Validation(Vec<String>),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Output { .. } => 2,
            Self::Numerical(_) => 3,
            Self::NotAbsolutelyContinuous(_) => 4,
            Self::Validation(_) => 5,
        }
    }

    fn config(field: &str, message: impl Into<String>) -> Self {
        Self::Config { field: field.into(), message: message.into() }
    }

    fn from_pricer(e: PricerError) -> Self {
        match e {
            PricerError::InvalidConfig(m) | PricerError::QuadratureUnavailable(m) => Self::config("pricer", m),
            e @ (PricerError::DimensionMismatch { .. } | PricerError::Payoff(_)) => Self::config("price", e.to_string()),
            e @ PricerError::Model(_) => Self::Numerical(e.to_string()),
        }
    }

    fn from_recovery(e: RecoveryError, formula: &str) -> Self {
        match e {
            RecoveryError::NotAbsolutelyContinuous => Self::NotAbsolutelyContinuous(format!("formula {formula}")),
            RecoveryError::DimensionNotTwo(_) | RecoveryError::Unsupported(_) => {
                Self::config("formulas", format!("{formula}: {e}"))
            }
            RecoveryError::InvalidGrid(_) | RecoveryError::DimensionMismatch { .. } => {
                Self::config("grid", format!("{formula}: {e}"))
            }
            RecoveryError::Pricer(p) => match Self::from_pricer(p) {
                Self::Numerical(m) => Self::Numerical(format!("{formula}: {m}")),
                other => other,
            },
            other => Self::Numerical(format!("{formula}: {other}")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rainbow-density", version, about = "State-price density recovery from rainbow option prices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config and the environment.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed descriptor for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Worker threads: a count or `auto`.
    #[arg(long, global = true, default_value = "auto", value_parser = parse_threads)]
    pub threads: Threads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Price the strike table of the `price` block.
    Price,
    /// Recover densities for every formula in `formulas`.
    Recover,
    /// Run the named checks and write a pass/fail report.
    Validate,
}

impl Command {
    fn as_str(&self) -> &'static str {
        match self {
            Self::Price => "price",
            Self::Recover => "recover",
            Self::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Auto,
    Count(usize),
}

fn parse_threads(s: &str) -> Result<Threads, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Threads::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Threads::Count(n)),
        _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref().ok_or_else(|| CliError::config("--config", "a config file is required"))?;
    let exp = Experiment::load(config, cli.seed.as_deref())?;
    let env = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let out = exp.output_dir(cli.out.as_deref(), env);
    std::fs::create_dir_all(&out).map_err(|e| output_error(&out, e))?;
    let threads = match cli.threads {
        Threads::Auto => 0,
        Threads::Count(n) => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config("--threads", e.to_string()))?;
    let started = Instant::now();
    let result = pool.install(|| match cli.command {
        Command::Price => cmd_price(&exp, &out),
        Command::Recover => cmd_recover(&exp, &out),
        Command::Validate => cmd_validate(&exp, &out),
    });
    eprintln!("{} finished in {:.2?}", cli.command.as_str(), started.elapsed());
    result
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output { path: path.to_path_buf(), message: e.to_string() }
}

/// Provenance embedded in every output file.
#[derive(Debug, Clone, Serialize)]
struct Stamp<'a> {
    config_digest: &'a str,
    tool_version: &'a str,
}

fn stamp(exp: &Experiment) -> Stamp<'_> {
    Stamp { config_digest: &exp.digest, tool_version: TOOL_VERSION }
}

fn stamp_columns(exp: &Experiment) -> Vec<(String, String)> {
    vec![
        ("config_digest".into(), exp.digest.clone()),
        ("tool_version".into(), TOOL_VERSION.into()),
    ]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| output_error(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| output_error(path, e))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| output_error(path, e))?;
    w.write_record(header).map_err(|e| output_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| output_error(path, e))?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

#[derive(Debug, Clone, Serialize)]
struct PriceRow {
    component: Vec<f64>,
    outer: f64,
    p: PNorm,
    value: f64,
    error_bound: f64,
    method: &'static str,
}

/// The `(K̄, K)` table of the `price` block.
fn strike_table(exp: &Experiment) -> Result<Vec<StrikeSpec>, CliError> {
    let n = exp.dimension();
    let block = exp.config.price.as_ref().ok_or_else(|| CliError::config("price", "a price block is required"))?;
    let spec = |k: Vec<f64>, outer: f64, field: &str| {
        StrikeSpec::new(k, outer).map_err(|e| CliError::config(field, e.to_string()))
    };
    match (&block.rows, &block.component_axes) {
        (Some(rows), None) => rows
            .iter()
            .map(|r| {
                if r.len() != n + 1 {
                    return Err(CliError::config(
                        "price.rows",
                        format!("each row needs {} entries (K_1..K_{n}, K), got {}", n + 1, r.len()),
                    ));
                }
                spec(r[..n].to_vec(), r[n], "price.rows")
            })
            .collect(),
        (None, Some(axes)) => {
            if axes.len() != n || axes.iter().any(|a| a.is_empty()) {
                return Err(CliError::config(
                    "price.component_axes",
                    format!("needs {n} non-empty axes for a {n}-dimensional law"),
                ));
            }
            if block.outer.is_empty() {
                return Err(CliError::config("price.outer", "needs at least one outer strike"));
            }
            let mut table = Vec::new();
            for k in tensor(axes) {
                for &outer in &block.outer {
                    table.push(spec(k.clone(), outer, "price.component_axes")?);
                }
            }
            Ok(table)
        }
        _ => Err(CliError::config("price", "give exactly one of `rows` or `component_axes`")),
    }
}

/// Tensor product of the axes, last axis fastest.
fn tensor(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(*v);
                    next
                })
            })
            .collect()
    })
}

fn cmd_price(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let table = strike_table(exp)?;
    let block = exp.config.price.as_ref().expect("checked by strike_table");
    let methods = block.methods.clone().unwrap_or_else(|| vec![exp.pricer.method]);
    if block.p.is_empty() || methods.is_empty() {
        return Err(CliError::config("price", "`p` and `methods` need at least one entry"));
    }
    let mut rows = Vec::new();
    for method in &methods {
        let cfg = PricerConfig { method: *method, ..exp.pricer.clone() };
        for strikes in &table {
            for p in &block.p {
                let v = price(&exp.law, strikes, *p, &cfg).map_err(CliError::from_pricer)?;
                rows.push(PriceRow {
                    component: strikes.component().to_vec(),
                    outer: strikes.outer(),
                    p: *p,
                    value: v.value,
                    error_bound: v.error_bound,
                    method: v.method.as_str(),
                });
            }
        }
    }
    let n = exp.dimension();
    let mut header: Vec<String> = (1..=n).map(|j| format!("K{j}")).collect();
    header.extend(["K", "p", "value", "error_bound", "method"].map(String::from));
    header.extend(stamp_columns(exp).into_iter().map(|(k, _)| k));
    let extra: Vec<String> = stamp_columns(exp).into_iter().map(|(_, v)| v).collect();
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut rec: Vec<String> = r.component.iter().map(|v| v.to_string()).collect();
            rec.push(r.outer.to_string());
            rec.push(r.p.to_string());
            rec.push(r.value.to_string());
            rec.push(r.error_bound.to_string());
            rec.push(r.method.to_string());
            rec.extend(extra.iter().cloned());
            rec
        })
        .collect();
    write_csv(&out.join("prices.csv"), &header, &records)?;
    eprintln!("price: {} rows", rows.len());
    Ok(())
}

/// One recovered grid with the label used for file names and the summary.
struct Labelled {
    label: String,
    formula: FormulaTag,
    p: Option<PNorm>,
    report: RecoveryReport,
}

fn p_label(p: PNorm) -> String {
    match p {
        PNorm::Infinity => "inf".into(),
        PNorm::Finite(q) => q.to_string(),
    }
}

fn run_formulas(exp: &Experiment) -> Result<Vec<Labelled>, CliError> {
    if exp.config.formulas.is_empty() {
        return Err(CliError::config("formulas", "recover needs at least one formula"));
    }
    let grid = exp.grid()?;
    let diff = exp.diff_spec();
    let limit = exp.limit_spec()?;
    let (law, cfg) = (&exp.law, &exp.pricer);
    let mut out = Vec::new();
    for formula in &exp.config.formulas {
        let tag = formula.as_str();
        let wrap = |e| CliError::from_recovery(e, tag);
        match formula {
            FormulaTag::Main => out.push(Labelled {
                label: tag.into(),
                formula: *formula,
                p: None,
                report: recover_density_main(law, &grid, cfg, &diff).map_err(wrap)?,
            }),
            FormulaTag::Cp => {
                for p in &exp.config.p_values {
                    out.push(Labelled {
                        label: format!("cp-p{}", p_label(*p)),
                        formula: *formula,
                        p: Some(*p),
                        report: recover_density_cp(law, &grid, *p, cfg, &diff, &limit).map_err(wrap)?,
                    });
                }
            }
            FormulaTag::Cdf => out.push(Labelled {
                label: tag.into(),
                formula: *formula,
                p: None,
                report: recover_density_cdf(law, &grid, cfg, &diff).map_err(wrap)?,
            }),
            FormulaTag::N2Alternative => out.push(Labelled {
                label: tag.into(),
                formula: *formula,
                p: None,
                report: recover_density_n2_alternative(law, &grid, cfg, &diff, &limit).map_err(wrap)?,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    stamp: Stamp<'a>,
    label: &'a str,
    report: &'a RecoveryReport,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    label: String,
    formula: FormulaTag,
    p: Option<PNorm>,
    linf: Option<f64>,
    l1: Option<f64>,
    max_error: f64,
    mass: f64,
    analytic_box_mass: Option<f64>,
    analytic_trapezoid_mass: Option<f64>,
    negative_points: usize,
    price_evaluations: usize,
}

/// Agreement of two recovered grids.
#[derive(Debug, Clone, Serialize)]
struct Agreement {
    a: String,
    b: String,
    max_gap: f64,
    /// Largest `|a - b| - (err_a + err_b)`; non-positive when the grids agree.
    max_excess: f64,
    agree: bool,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    #[serde(flatten)]
    stamp: Stamp<'a>,
    grids: Vec<SummaryRow>,
    agreement: Vec<Agreement>,
}

fn summarize<'a>(exp: &'a Experiment, grids: &[Labelled]) -> Summary<'a> {
    let rows = grids
        .iter()
        .map(|g| {
            let r = &g.report;
            SummaryRow {
                label: g.label.clone(),
                formula: g.formula,
                p: g.p,
                linf: r.oracle_comparison.as_ref().map(|o| o.linf),
                l1: r.oracle_comparison.as_ref().map(|o| o.l1),
                max_error: r.density_grid.points.iter().map(|p| p.error).fold(0.0, f64::max),
                mass: r.mass,
                analytic_box_mass: r.analytic_box_mass,
                analytic_trapezoid_mass: r.analytic_trapezoid_mass,
                negative_points: r.density_grid.negativity.count,
                price_evaluations: r.diagnostics.price_evaluations,
            }
        })
        .collect();
    let mut agreement = Vec::new();
    for (i, a) in grids.iter().enumerate() {
        for b in &grids[i + 1..] {
            let pa = &a.report.density_grid.points;
            let pb = &b.report.density_grid.points;
            let max_gap = pa.iter().zip(pb).map(|(x, y)| (x.value - y.value).abs()).fold(0.0, f64::max);
            let max_excess = pa
                .iter()
                .zip(pb)
                .map(|(x, y)| (x.value - y.value).abs() - (x.error + y.error))
                .fold(f64::NEG_INFINITY, f64::max);
            agreement.push(Agreement {
                a: a.label.clone(),
                b: b.label.clone(),
                max_gap,
                max_excess,
                agree: max_excess <= 0.0,
            });
        }
    }
    Summary { stamp: stamp(exp), grids: rows, agreement }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_recover(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let grids = run_formulas(exp)?;
    for g in &grids {
        let json = out.join(format!("recovery_{}.json", g.label));
        write_json(&json, &ReportFile { stamp: stamp(exp), label: &g.label, report: &g.report })?;
        let csv_path = out.join(format!("density_{}.csv", g.label));
        let mut buf = Vec::new();
        g.report
            .density_grid
            .write_csv(&mut buf, &stamp_columns(exp))
            .map_err(|e| output_error(&csv_path, e))?;
        std::fs::write(&csv_path, buf).map_err(|e| output_error(&csv_path, e))?;
    }
    let summary = summarize(exp, &grids);
    write_json(&out.join("summary.json"), &summary)?;
    let mut header: Vec<String> =
        ["label", "formula", "p", "linf", "l1", "max_error", "mass", "analytic_box_mass", "analytic_trapezoid_mass"]
            .map(String::from)
            .to_vec();
    header.extend(stamp_columns(exp).into_iter().map(|(k, _)| k));
    let records: Vec<Vec<String>> = summary
        .grids
        .iter()
        .map(|r| {
            let mut rec = vec![
                r.label.clone(),
                r.formula.as_str().to_string(),
                r.p.map(p_label).unwrap_or_default(),
                opt(r.linf),
                opt(r.l1),
                r.max_error.to_string(),
                r.mass.to_string(),
                opt(r.analytic_box_mass),
                opt(r.analytic_trapezoid_mass),
            ];
            rec.extend(stamp_columns(exp).into_iter().map(|(_, v)| v));
            rec
        })
        .collect();
    write_csv(&out.join("summary.csv"), &header, &records)?;
    for r in &summary.grids {
        eprintln!(
            "recover {:<16} linf {:>10} l1 {:>10} max error {:.2e}",
            r.label,
            r.linf.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
            r.l1.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
            r.max_error
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ValidationFile<'a> {
    #[serde(flatten)]
    stamp: Stamp<'a>,
    passed: bool,
    checks: &'a [CheckResult],
}

fn cmd_validate(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    let results = run_checks(exp)?;
    let failed: Vec<String> =
        results.iter().filter(|c| c.status == CheckStatus::Fail).map(|c| c.name.clone()).collect();
    write_json(
        &out.join("validation.json"),
        &ValidationFile { stamp: stamp(exp), passed: failed.is_empty(), checks: &results },
    )?;
    let mut header: Vec<String> = ["check", "status", "measured", "tolerance", "detail"].map(String::from).to_vec();
    header.extend(stamp_columns(exp).into_iter().map(|(k, _)| k));
    let records: Vec<Vec<String>> = results
        .iter()
        .map(|c| {
            let status = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "fail",
                CheckStatus::Skipped => "skipped",
            };
            let mut rec = vec![c.name.clone(), status.into(), opt(c.measured), opt(c.tolerance), c.detail.clone()];
            rec.extend(stamp_columns(exp).into_iter().map(|(_, v)| v));
            rec
        })
        .collect();
    write_csv(&out.join("validation.csv"), &header, &records)?;
    let mut stderr = std::io::stderr().lock();
    for c in &results {
        let _ = writeln!(stderr, "{:<26} {:?} {}", c.name, c.status, c.detail);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threads_flag_parses() {
        assert_eq!(parse_threads("auto").unwrap(), Threads::Auto);
        assert_eq!(parse_threads("4").unwrap(), Threads::Count(4));
        assert!(parse_threads("0").is_err());
        assert!(parse_threads("many").is_err());
    }

    #[test]
    fn tensor_orders_last_axis_fastest() {
        let t = tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(t, vec![vec![1.0, 3.0], vec![1.0, 4.0], vec![2.0, 3.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::config("grid", "x").exit_code(), 2);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 3);
        assert_eq!(CliError::NotAbsolutelyContinuous("x".into()).exit_code(), 4);
        assert_eq!(CliError::Validation(vec!["a".into()]).exit_code(), 5);
    }

    #[test]
    fn recovery_errors_map_to_exit_codes() {
        assert_eq!(CliError::from_recovery(RecoveryError::NotAbsolutelyContinuous, "main").exit_code(), 4);
        assert_eq!(CliError::from_recovery(RecoveryError::DimensionNotTwo(3), "n2-alternative").exit_code(), 2);
        let e = RecoveryError::Fdiff(crate::fdiff::FdiffError::NoStabilization { last_gap: 1.0 });
        assert_eq!(CliError::from_recovery(e, "cp").exit_code(), 3);
    }
}
