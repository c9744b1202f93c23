//! Density and probability recovery from rainbow option prices.
//!
//! Four routes recover `dQ/dm` on a rectangular strike grid:
//!
//! - `main`: `∂^n/∂K_1..∂K_n Σ_i ∂V^∞/∂K_i (K̄, 0)`, the inner sum taken as the
//!   derivative along `(1, .., 1)`;
//! - `cp`: `lim_{K -> 0+} ∂^(n+1)/∂K_1..∂K_n∂K V^p(K̄, K)` for any `0 < p <= ∞`;
//! - `cdf`: `∂^n/∂K_1..∂K_n Q(X <= K̄)`, the kink-free reference;
//! - `n2-alternative`: for two assets,
//!   `∂²/∂K_1∂K_2 D_(-1,-1,1) V^1(K_1, K_2, 0+)` with
//!   `D_(-1,-1,1) V^1(K_1, K_2, 0+) = Q(X_1 >= K_1, X_2 >= K_2)`.
//!
//! Prices enter the difference stencils with their cubature error as noise; the
//! truncation bound is omitted because it varies smoothly with the strikes.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fdiff::{
    directional_derivative_parts, limit_k_to_zero_est, mixed_partial_est, mixed_partial_parts, right_derivative_est,
    DiffSpec, FdiffError, LimitSpec, DEFAULT_RELATIVE_STEP,
};
use crate::models::{ModelError, TerminalLaw};
use crate::payoffs::{PNorm, PayoffError, StrikeSpec};
use crate::pricers::{price, PricerConfig, PricerError, PricingMethod};
use crate::Estimate;

/// Far-strike surrogate for `K_j -> ∞`: the marginal `1 - FAR_TAIL` quantile.
pub const FAR_TAIL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("law is not absolutely continuous; no density to recover")]
    NotAbsolutelyContinuous,
    #[error("this formula needs exactly two assets, law has {0}")]
    DimensionNotTwo(usize),
    #[error("dimension mismatch: law has {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Pricer(#[from] PricerError),
    #[error(transparent)]
    Fdiff(#[from] FdiffError),
    #[error(transparent)]
    Payoff(#[from] PayoffError),
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for RecoveryError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NotAbsolutelyContinuous => Self::NotAbsolutelyContinuous,
            ModelError::DimensionMismatch { expected, got } => Self::DimensionMismatch { expected, got },
            other => Self::Model(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormulaTag {
    Main,
    Cp,
    Cdf,
    N2Alternative,
}

impl FormulaTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Main => "main",
            Self::Cp => "cp",
            Self::Cdf => "cdf",
            Self::N2Alternative => "n2-alternative",
        }
    }
}

/// Operator order of the `main` route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MainOrder {
    /// Sum of first partials, then the `n`-th mixed partial.
    #[default]
    DirectionalFirst,
    MixedFirst,
}

/// Operator order of the `cp` route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CpOrder {
    /// Order-`(n+1)` mixed partial at each `K`, then `K -> 0+`.
    #[default]
    DerivativeThenLimit,
    LimitThenDerivative,
}

/// Rectangular lattice of strike points; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Vec<f64>>,
}

impl GridSpec {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self, RecoveryError> {
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(RecoveryError::InvalidGrid("every axis needs at least one point".into()));
        }
        for axis in &axes {
            if axis.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(RecoveryError::InvalidGrid(
                    "axes must be strictly increasing, finite and nonnegative".into(),
                ));
            }
        }
        Ok(Self { axes })
    }

    /// `counts[j]` equally spaced points on `[lower[j], upper[j]]`.
    pub fn uniform(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self, RecoveryError> {
        if lower.len() != upper.len() || lower.len() != counts.len() {
            return Err(RecoveryError::InvalidGrid("lower, upper and counts must have one entry per axis".into()));
        }
        let axes = lower
            .iter()
            .zip(upper)
            .zip(counts)
            .map(|((a, b), &m)| match m {
                0 => Vec::new(),
                1 => vec![*a],
                _ => (0..m).map(|i| a + (b - a) * i as f64 / (m - 1) as f64).collect(),
            })
            .collect();
        Self::new(axes)
    }

    pub fn dimension(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        let mut index = vec![0usize; self.dimension()];
        loop {
            out.push(index.iter().enumerate().map(|(j, &i)| self.axes[j][i]).collect());
            let mut j = self.dimension();
            loop {
                if j == 0 {
                    return out;
                }
                j -= 1;
                index[j] += 1;
                if index[j] < self.axes[j].len() {
                    break;
                }
                index[j] = 0;
            }
        }
    }

    /// Product trapezoid weights in [`points`](Self::points) order; zero along
    /// degenerate single-point axes.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|a| {
                let m = a.len();
                (0..m)
                    .map(|i| {
                        let left = if i > 0 { a[i] - a[i - 1] } else { 0.0 };
                        let right = if i + 1 < m { a[i + 1] - a[i] } else { 0.0 };
                        0.5 * (left + right)
                    })
                    .collect()
            })
            .collect();
        let grid = GridSpec { axes: per_axis };
        grid.points().iter().map(|w| w.iter().product()).collect()
    }

    fn check_interior(&self, lo: &[f64], hi: &[f64], reach: &[f64]) -> Result<(), RecoveryError> {
        for (j, axis) in self.axes.iter().enumerate() {
            let (first, last) = (axis[0], axis[axis.len() - 1]);
            if first - reach[j] < lo[j] || last + reach[j] > hi[j] {
                return Err(RecoveryError::InvalidGrid(format!(
                    "axis {j} spans [{first}, {last}] but stencils need it inside [{}, {}]",
                    lo[j] + reach[j],
                    hi[j] - reach[j]
                )));
            }
        }
        Ok(())
    }
}

/// `D_(-1,-1,1) V^1(K_1, K_2, 0+)` against the joint survival probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub directional: Estimate,
    pub joint_survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub strikes: Vec<f64>,
    pub value: f64,
    pub error: f64,
    pub analytic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub identity: Option<IdentityCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NegativityReport {
    pub count: usize,
    /// Magnitude of the most negative recovered value, zero if none.
    pub worst: f64,
    /// Negative values larger in magnitude than their own error estimate.
    pub beyond_error: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: GridSpec,
    pub formula: FormulaTag,
    pub points: Vec<DensityPoint>,
    pub negativity: NegativityReport,
}

impl DensityGrid {
    fn new(grid: GridSpec, formula: FormulaTag, points: Vec<DensityPoint>) -> Self {
        let mut negativity = NegativityReport::default();
        for pt in points.iter().filter(|pt| pt.value < 0.0) {
            negativity.count += 1;
            negativity.worst = negativity.worst.max(-pt.value);
            if -pt.value > pt.error {
                negativity.beyond_error += 1;
            }
        }
        Self { grid, formula, points, negativity }
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    /// Trapezoidal integral of the recovered values over the grid.
    pub fn mass(&self) -> f64 {
        self.grid
            .trapezoid_weights()
            .iter()
            .zip(&self.points)
            .map(|(w, p)| w * p.value)
            .sum()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.grid.dimension()).map(|j| format!("k{j}")).collect();
        h.extend(["recovered", "analytic", "error", "formula_tag"].map(String::from));
        h
    }

    /// CSV rows `k_1..k_n, recovered, analytic, error, formula_tag`, followed by
    /// the `extra` columns given as `(name, value)`.
    pub fn write_csv<W: Write>(&self, out: W, extra: &[(String, String)]) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.csv_header();
        header.extend(extra.iter().map(|(k, _)| k.clone()));
        w.write_record(&header)?;
        for p in &self.points {
            let mut row: Vec<String> = p.strikes.iter().map(|v| v.to_string()).collect();
            row.push(p.value.to_string());
            row.push(p.analytic.map(|v| v.to_string()).unwrap_or_default());
            row.push(p.error.to_string());
            row.push(self.formula.as_str().to_string());
            row.extend(extra.iter().map(|(_, v)| v.clone()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub linf: f64,
    /// Grid-average absolute error.
    pub l1: f64,
}

/// Deterministic run statistics; wall time is deliberately excluded so reports
/// are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryDiagnostics {
    pub price_evaluations: usize,
    pub base_step: Vec<f64>,
    pub richardson_levels: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shrink_sequence: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<PNorm>,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub density_grid: DensityGrid,
    pub oracle_comparison: Option<OracleComparison>,
    pub mass: f64,
    /// `Q` of the grid's bounding box, for comparison with `mass`.
    pub analytic_box_mass: Option<f64>,
    /// The same trapezoid rule applied to the analytic density; separates the
    /// rule's discretization error from the recovery error.
    pub analytic_trapezoid_mass: Option<f64>,
    pub diagnostics: RecoveryDiagnostics,
}

impl RecoveryReport {
    fn assemble(
        law: &TerminalLaw,
        grid: GridSpec,
        formula: FormulaTag,
        points: Vec<DensityPoint>,
        diagnostics: RecoveryDiagnostics,
    ) -> Self {
        let density_grid = DensityGrid::new(grid, formula, points);
        let oracle_comparison = oracle_errors(&density_grid.points);
        let mass = density_grid.mass();
        let analytic_box_mass = box_mass(law, &density_grid.grid);
        let analytic_trapezoid_mass = density_grid
            .points
            .iter()
            .zip(density_grid.grid.trapezoid_weights())
            .map(|(p, w)| p.analytic.map(|a| a * w))
            .sum::<Option<f64>>();
        Self { density_grid, oracle_comparison, mass, analytic_box_mass, analytic_trapezoid_mass, diagnostics }
    }
}

fn oracle_errors(points: &[DensityPoint]) -> Option<OracleComparison> {
    let gaps: Option<Vec<f64>> = points.iter().map(|p| p.analytic.map(|a| (p.value - a).abs())).collect();
    let gaps = gaps?;
    if gaps.is_empty() {
        return None;
    }
    Some(OracleComparison {
        linf: gaps.iter().copied().fold(0.0, f64::max),
        l1: gaps.iter().sum::<f64>() / gaps.len() as f64,
    })
}

/// `Q(box)` by inclusion–exclusion over the joint CDF at the box corners.
fn box_mass(law: &TerminalLaw, grid: &GridSpec) -> Option<f64> {
    let n = grid.dimension();
    let mut total = 0.0;
    for mask in 0..(1usize << n) {
        let mut corner = Vec::with_capacity(n);
        let mut sign = 1.0;
        for (j, axis) in grid.axes.iter().enumerate() {
            if mask & (1 << j) != 0 {
                corner.push(axis[axis.len() - 1]);
            } else {
                corner.push(axis[0]);
                sign = -sign;
            }
        }
        let f = law.joint_cdf(&corner).ok()?;
        if f.error > 0.0 {
            return None;
        }
        total += sign * f.value;
    }
    Some(total)
}

/// Steps `DEFAULT_RELATIVE_STEP × E[X_j]` with one Richardson level.
pub fn default_diff_spec(law: &TerminalLaw) -> DiffSpec {
    let n = law.dimension();
    let steps = (0..n).map(|j| DEFAULT_RELATIVE_STEP * strike_scale(law, j)).collect();
    DiffSpec::central(vec![1; n], steps)
}

/// Six halvings from a tenth of the average marginal mean.
pub fn default_limit_spec(law: &TerminalLaw) -> LimitSpec {
    let n = law.dimension();
    let scale = (0..n).map(|j| strike_scale(law, j)).sum::<f64>() / n as f64;
    LimitSpec::default_for_scale(scale)
}

fn strike_scale(law: &TerminalLaw, j: usize) -> f64 {
    let m = law.marginal_mean(j);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Step for the outer strike `K`: the average component step.
fn outer_step(diff: &DiffSpec) -> f64 {
    diff.base_step.iter().sum::<f64>() / diff.base_step.len() as f64
}

/// Option prices as stencil inputs, counting evaluations.
struct Prices<'a> {
    law: &'a TerminalLaw,
    cfg: &'a PricerConfig,
    p: PNorm,
    count: &'a AtomicUsize,
}

impl Prices<'_> {
    fn at(&self, component: &[f64], outer: f64) -> Result<Estimate, RecoveryError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        let strikes = StrikeSpec::new(component.to_vec(), outer)?;
        let v = price(self.law, &strikes, self.p, self.cfg)?;
        Ok(Estimate::new(v.value, v.roughness()))
    }
}

/// Shared gate for the density routes. `reach` is the widest stencil excursion
/// per coordinate in units of `base_step`.
fn check_density_inputs(
    law: &TerminalLaw,
    grid: &GridSpec,
    cfg: &PricerConfig,
    diff: &DiffSpec,
    reach: f64,
    needs_prices: bool,
) -> Result<(), RecoveryError> {
    if !law.absolutely_continuous() {
        return Err(RecoveryError::NotAbsolutelyContinuous);
    }
    let n = law.dimension();
    if grid.dimension() != n {
        return Err(RecoveryError::DimensionMismatch { expected: n, got: grid.dimension() });
    }
    if diff.base_step.len() != n || diff.base_step.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(RecoveryError::InvalidInput(format!("difference spec needs {n} positive base steps")));
    }
    cfg.validate()?;
    if needs_prices && cfg.resolve(law)? == PricingMethod::MonteCarlo {
        return Err(RecoveryError::Unsupported(format!(
            "Monte Carlo prices cannot support strike derivatives of total order {} (noise grows like ε/h^k)",
            n + 1
        )));
    }
    let (lo, hi) = law.truncation_box(cfg.truncation_quantile);
    let reach: Vec<f64> = diff.base_step.iter().map(|h| reach * h).collect();
    grid.check_interior(&lo, &hi, &reach)
}

fn analytic_density(law: &TerminalLaw, k: &[f64]) -> Option<f64> {
    law.density(k).ok()
}

fn diagnostics(
    count: &AtomicUsize,
    diff: &DiffSpec,
    shrink: Option<&LimitSpec>,
    p: Option<PNorm>,
    order: &str,
) -> RecoveryDiagnostics {
    RecoveryDiagnostics {
        price_evaluations: count.load(Ordering::Relaxed),
        base_step: diff.base_step.clone(),
        richardson_levels: diff.richardson_levels,
        shrink_sequence: shrink.map(|l| l.shrink_sequence().to_vec()),
        p,
        order: order.to_string(),
    }
}

fn sweep<F>(grid: &GridSpec, law: &TerminalLaw, at: F) -> Result<Vec<DensityPoint>, RecoveryError>
where
    F: Fn(&[f64]) -> Result<(Estimate, Option<IdentityCheck>), RecoveryError> + Sync,
{
    grid.points()
        .par_iter()
        .map(|k| {
            let (est, identity) = at(k)?;
            Ok(DensityPoint {
                strikes: k.clone(),
                value: est.value,
                error: est.error,
                analytic: analytic_density(law, k),
                identity,
            })
        })
        .collect()
}

fn mixed_spec(diff: &DiffSpec, n: usize) -> DiffSpec {
    DiffSpec::central(vec![1; n], diff.base_step[..n].to_vec()).with_levels(diff.richardson_levels)
}

pub fn recover_density_main(
    law: &TerminalLaw,
    grid: &GridSpec,
    cfg: &PricerConfig,
    diff: &DiffSpec,
) -> Result<RecoveryReport, RecoveryError> {
    recover_density_main_ordered(law, grid, cfg, diff, MainOrder::DirectionalFirst)
}

pub fn recover_density_main_ordered(
    law: &TerminalLaw,
    grid: &GridSpec,
    cfg: &PricerConfig,
    diff: &DiffSpec,
    order: MainOrder,
) -> Result<RecoveryReport, RecoveryError> {
    check_density_inputs(law, grid, cfg, diff, 1.0, true)?;
    let n = law.dimension();
    let count = AtomicUsize::new(0);
    let prices = Prices { law, cfg, p: PNorm::Infinity, count: &count };
    let spec = mixed_spec(diff, n);
    let ones = vec![1.0; n];
    let points = sweep(grid, law, |k| {
        let v = |x: &[f64]| prices.at(x, 0.0);
        let mut inner_discrepancy = 0.0_f64;
        let outer = match order {
            MainOrder::DirectionalFirst => mixed_partial_parts(
                |kb: &[f64]| {
                    let d = directional_derivative_parts(v, kb, &ones, &spec)?;
                    inner_discrepancy = inner_discrepancy.max(d.discrepancy);
                    Ok::<_, RecoveryError>(d.noisy())
                },
                k,
                &spec,
            )?,
            MainOrder::MixedFirst => directional_derivative_parts(
                |kb: &[f64]| {
                    let d = mixed_partial_parts(v, kb, &spec)?;
                    inner_discrepancy = inner_discrepancy.max(d.discrepancy);
                    Ok::<_, RecoveryError>(d.noisy())
                },
                k,
                &ones,
                &spec,
            )?,
        };
        let est = outer.estimate();
        Ok((Estimate::new(est.value, est.error + inner_discrepancy), None))
    })?;
    let order_name = match order {
        MainOrder::DirectionalFirst => "directional-first",
        MainOrder::MixedFirst => "mixed-first",
    };
    let diag = diagnostics(&count, diff, None, Some(PNorm::Infinity), order_name);
    Ok(RecoveryReport::assemble(law, grid.clone(), FormulaTag::Main, points, diag))
}

pub fn recover_density_cp(
    law: &TerminalLaw,
    grid: &GridSpec,
    p: PNorm,
    cfg: &PricerConfig,
    diff: &DiffSpec,
    limit: &LimitSpec,
) -> Result<RecoveryReport, RecoveryError> {
    recover_density_cp_ordered(law, grid, p, cfg, diff, limit, CpOrder::DerivativeThenLimit)
}

pub fn recover_density_cp_ordered(
    law: &TerminalLaw,
    grid: &GridSpec,
    p: PNorm,
    cfg: &PricerConfig,
    diff: &DiffSpec,
    limit: &LimitSpec,
    order: CpOrder,
) -> Result<RecoveryReport, RecoveryError> {
    check_density_inputs(law, grid, cfg, diff, 0.5, true)?;
    let n = law.dimension();
    let count = AtomicUsize::new(0);
    let prices = Prices { law, cfg, p, count: &count };
    let h_outer = outer_step(diff);
    let levels = diff.richardson_levels;
    let points = sweep(grid, law, |k| {
        let v = |x: &[f64]| prices.at(&x[..n], x[n]);
        let with_outer = |kb: &[f64], kk: f64| {
            let mut x = kb.to_vec();
            x.push(kk);
            let mut steps = diff.base_step.clone();
            steps.push(h_outer.min(kk));
            (x, steps)
        };
        let est = match order {
            CpOrder::DerivativeThenLimit => limit_k_to_zero_est(
                |kk| {
                    let (x, steps) = with_outer(k, kk);
                    let spec = DiffSpec::central(vec![1; n + 1], steps).with_levels(levels);
                    mixed_partial_est(v, &x, &spec)
                },
                limit,
            )?,
            CpOrder::LimitThenDerivative => mixed_partial_est(
                |kb: &[f64]| {
                    limit_k_to_zero_est(
                        |kk| {
                            let (x, steps) = with_outer(kb, kk);
                            let mut orders = vec![0; n];
                            orders.push(1);
                            let spec = DiffSpec::central(orders, steps).with_levels(levels);
                            mixed_partial_est(v, &x, &spec)
                        },
                        limit,
                    )
                },
                k,
                &mixed_spec(diff, n),
            )?,
        };
        Ok((est, None))
    })?;
    let order_name = match order {
        CpOrder::DerivativeThenLimit => "derivative-then-limit",
        CpOrder::LimitThenDerivative => "limit-then-derivative",
    };
    let diag = diagnostics(&count, diff, Some(limit), Some(p), order_name);
    Ok(RecoveryReport::assemble(law, grid.clone(), FormulaTag::Cp, points, diag))
}

/// Mixed partial of the joint CDF. Uses the law's deterministic CDF up to three
/// dimensions.
pub fn recover_density_cdf(
    law: &TerminalLaw,
    grid: &GridSpec,
    cfg: &PricerConfig,
    diff: &DiffSpec,
) -> Result<RecoveryReport, RecoveryError> {
    check_density_inputs(law, grid, cfg, diff, 0.5, false)?;
    let n = law.dimension();
    if n > 3 {
        return Err(RecoveryError::Unsupported(
            "the joint CDF of more than three coordinates is only available by Monte Carlo".into(),
        ));
    }
    let count = AtomicUsize::new(0);
    let spec = mixed_spec(diff, n);
    let points = sweep(grid, law, |k| {
        let cdf = |x: &[f64]| {
            count.fetch_add(1, Ordering::Relaxed);
            law.joint_cdf(x).map_err(RecoveryError::from)
        };
        Ok((mixed_partial_est(cdf, k, &spec)?, None))
    })?;
    let mut diag = diagnostics(&count, diff, None, None, "mixed-partial");
    diag.price_evaluations = count.load(Ordering::Relaxed);
    Ok(RecoveryReport::assemble(law, grid.clone(), FormulaTag::Cdf, points, diag))
}

/// Two-asset alternative form, with the directional derivative along
/// `(-1, -1, 1)` evaluated at `K = 0+` through the shrink sequence. Each point
/// also records `D_(-1,-1,1) V^1(K̄, 0+)` next to `Q(X_1 >= K_1, X_2 >= K_2)`.
pub fn recover_density_n2_alternative(
    law: &TerminalLaw,
    grid: &GridSpec,
    cfg: &PricerConfig,
    diff: &DiffSpec,
    limit: &LimitSpec,
) -> Result<RecoveryReport, RecoveryError> {
    let n = law.dimension();
    if n != 2 {
        return Err(RecoveryError::DimensionNotTwo(n));
    }
    check_density_inputs(law, grid, cfg, diff, 1.0, true)?;
    let count = AtomicUsize::new(0);
    let prices = Prices { law, cfg, p: PNorm::ONE, count: &count };
    let h_outer = outer_step(diff);
    let levels = diff.richardson_levels;
    let direction = [-1.0, -1.0, 1.0];
    let points = sweep(grid, law, |k| {
        let v = |x: &[f64]| prices.at(&x[..2], x[2]);
        let ray = |kb: &[f64], kk: f64| {
            let steps = vec![diff.base_step[0], diff.base_step[1], h_outer.min(kk)];
            let spec = DiffSpec::central(vec![1; 3], steps).with_levels(levels);
            directional_derivative_parts(v, &[kb[0], kb[1], kk], &direction, &spec)
        };
        let outer = mixed_spec(diff, 2);
        let density = limit_k_to_zero_est(
            |kk| {
                let mut inner_discrepancy = 0.0_f64;
                let d = mixed_partial_parts(
                    |kb: &[f64]| {
                        let d = ray(kb, kk)?;
                        inner_discrepancy = inner_discrepancy.max(d.discrepancy);
                        Ok::<_, RecoveryError>(d.noisy())
                    },
                    k,
                    &outer,
                )?;
                let e = d.estimate();
                Ok::<_, RecoveryError>(Estimate::new(e.value, e.error + inner_discrepancy))
            },
            limit,
        )?;
        let directional = limit_k_to_zero_est(|kk| ray(k, kk).map(|d| d.estimate()), limit)?;
        let joint_survival = joint_survival(law, k)?;
        Ok((density, Some(IdentityCheck { directional, joint_survival })))
    })?;
    let diag = diagnostics(&count, diff, Some(limit), Some(PNorm::ONE), "derivative-then-limit");
    Ok(RecoveryReport::assemble(law, grid.clone(), FormulaTag::N2Alternative, points, diag))
}

/// `Q(X_1 >= k_1, X_2 >= k_2)` from the joint CDF and the marginals.
pub fn joint_survival(law: &TerminalLaw, k: &[f64]) -> Result<f64, RecoveryError> {
    if k.len() != 2 {
        return Err(RecoveryError::DimensionNotTwo(k.len()));
    }
    law.check_dimension(2)?;
    let both_below = law.joint_cdf(k)?.value;
    Ok(1.0 - law.marginal_cdf(0, k[0]) - law.marginal_cdf(1, k[1]) + both_below)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRung {
    pub strike: f64,
    pub recovered: Estimate,
    pub analytic: f64,
}

/// `Q(X_j >= K_j) = -∂⁺/∂K_j V^1(K̄, 0)` along a ladder of `K_j`, with the other
/// strikes held at `base`.
pub fn recover_marginal_survival(
    law: &TerminalLaw,
    j: usize,
    ladder: &[f64],
    base: &[f64],
    cfg: &PricerConfig,
    diff: &DiffSpec,
) -> Result<Vec<SurvivalRung>, RecoveryError> {
    let n = law.dimension();
    if base.len() != n {
        return Err(RecoveryError::DimensionMismatch { expected: n, got: base.len() });
    }
    if j >= n || diff.base_step.len() != n {
        return Err(RecoveryError::InvalidInput(format!("coordinate {j} or step vector out of range")));
    }
    if ladder.is_empty() || ladder.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(RecoveryError::InvalidInput("ladder must be non-empty and strictly increasing".into()));
    }
    let count = AtomicUsize::new(0);
    let prices = Prices { law, cfg, p: PNorm::ONE, count: &count };
    let spec = DiffSpec::right(n, j, diff.base_step[j]).with_right_tolerance(diff.right_tolerance);
    ladder
        .par_iter()
        .map(|&kj| {
            let mut point = base.to_vec();
            point[j] = kj;
            let d = right_derivative_est(|x: &[f64]| prices.at(x, 0.0), &point, j, &spec)?;
            Ok(SurvivalRung {
                strike: kj,
                recovered: Estimate::new(-d.value, d.error),
                analytic: law.marginal_survival_analytic(j, kj)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumDecomposition {
    /// `Σ_i V^p` with every strike but the `i`-th pushed to its far surrogate.
    pub lhs: Estimate,
    /// `V^1(K̄, 0)`.
    pub rhs: Estimate,
    pub gap: f64,
    /// `(n - 1) Σ_j E[(X_j - K_far,j)^+]`, the residual of the far surrogate.
    pub tail_bound: f64,
    pub far_strikes: Vec<f64>,
    pub holds: bool,
}

/// Checks `Σ_i lim_{K_j -> ∞, j != i} V^p(K̄, 0) = V^1(K̄, 0)`.
///
/// The limit is realised at the marginal `1 - FAR_TAIL` quantile, or at the
/// support edge for bounded laws. The tail bound uses `||u||_p <= u_i + ||u_-i||_1`,
/// which needs `p >= 1`.
pub fn check_sum_decomposition(
    law: &TerminalLaw,
    strikes: &[f64],
    p: PNorm,
    cfg: &PricerConfig,
) -> Result<SumDecomposition, RecoveryError> {
    let n = law.dimension();
    if strikes.len() != n {
        return Err(RecoveryError::DimensionMismatch { expected: n, got: strikes.len() });
    }
    if let PNorm::Finite(q) = p {
        if q < 1.0 {
            return Err(RecoveryError::InvalidInput("the far-strike tail bound needs p >= 1".into()));
        }
    }
    let (_, far_edge) = law.truncation_box(FAR_TAIL);
    let far_strikes: Vec<f64> = strikes.iter().zip(&far_edge).map(|(k, f)| k.max(*f)).collect();
    let mut lhs = Estimate::exact(0.0);
    for i in 0..n {
        let mut k = far_strikes.clone();
        k[i] = strikes[i];
        let v = price(law, &StrikeSpec::new(k, 0.0)?, p, cfg)?;
        lhs = Estimate::new(lhs.value + v.value, lhs.error + v.error_bound);
    }
    let rhs = price(law, &StrikeSpec::new(strikes.to_vec(), 0.0)?, PNorm::ONE, cfg)?.estimate();
    let residual: f64 = (0..n).map(|j| law.marginal_call(j, far_strikes[j])).sum();
    let tail_bound = (n - 1) as f64 * residual;
    let gap = (lhs.value - rhs.value).abs();
    let holds = gap <= tail_bound + lhs.error + rhs.error;
    Ok(SumDecomposition { lhs, rhs, gap, tail_bound, far_strikes, holds })
}

/// `∫ f(a) C''(a) da` over `[lower, upper]` with `C''` the three-point second
/// difference of the call curve at step `h = spec.base_step[0]`, on a trapezoid
/// grid of spacing `h`. The error compares against the same rule at `2h`.
pub fn price_by_density_1d<C, F>(
    mut call_curve: C,
    payoff: F,
    lower: f64,
    upper: f64,
    spec: &DiffSpec,
) -> Result<Estimate, FdiffError>
where
    C: FnMut(f64) -> f64,
    F: Fn(f64) -> f64,
{
    let h = spec.base_step.first().copied().unwrap_or(f64::NAN);
    if !(h > 0.0 && h.is_finite()) || !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
        return Err(FdiffError::InvalidSpec("need a positive step and a finite interval".into()));
    }
    let intervals = ((upper - lower) / h).round().max(2.0) as usize;
    let intervals = intervals + intervals % 2;
    let h = (upper - lower) / intervals as f64;
    if let Some(lb) = spec.lower_bounds.as_ref().and_then(|l| l.first()) {
        if lower - 2.0 * h < *lb {
            return Err(FdiffError::StencilOutOfDomain { coordinate: 0, node: lower - 2.0 * h });
        }
    }
    // curve at lower + i h for i in -2..=intervals + 2
    let curve: Vec<f64> = (0..intervals + 5).map(|i| call_curve(lower + (i as f64 - 2.0) * h)).collect();
    if let Some(i) = curve.iter().position(|c| !c.is_finite()) {
        return Err(FdiffError::NonFiniteEvaluation { at: vec![lower + (i as f64 - 2.0) * h] });
    }
    let rule = |stride: usize| {
        let step = h * stride as f64;
        let m = intervals / stride;
        (0..=m)
            .map(|i| {
                let c = 2 + i * stride;
                let second = (curve[c + stride] - 2.0 * curve[c] + curve[c - stride]) / (step * step);
                let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                w * step * payoff(lower + (i * stride) as f64 * h) * second
            })
            .sum::<f64>()
    };
    let fine = rule(1);
    let coarse = rule(2);
    if !fine.is_finite() {
        return Err(FdiffError::NonFiniteEvaluation { at: vec![lower, upper] });
    }
    Ok(Estimate::new(fine, (fine - coarse).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gaussian::norm_cdf;

    fn unit_square() -> TerminalLaw {
        TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    fn lognormal(n: usize) -> TerminalLaw {
        TerminalLaw::independent_lognormal(vec![1.0; n], vec![0.2; n], 1.0).unwrap()
    }

    fn lognormal_pdf(x: f64) -> f64 {
        let z = (x.ln() + 0.02) / 0.2;
        (-0.5 * z * z).exp() / (x * 0.2 * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn black_call(k: f64) -> f64 {
        let d1 = (-k.ln() + 0.02) / 0.2;
        norm_cdf(d1) - k * norm_cdf(d1 - 0.2)
    }

    #[test]
    fn grid_points_and_weights() {
        let g = GridSpec::uniform(&[0.0, 1.0], &[1.0, 2.0], &[3, 2]).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![0.0, 1.0]);
        assert_eq!(pts[1], vec![0.0, 2.0]);
        assert_eq!(pts[5], vec![1.0, 2.0]);
        let w: f64 = g.trapezoid_weights().iter().sum();
        assert!((w - 1.0).abs() < 1e-15);
        assert!(GridSpec::new(vec![vec![1.0, 0.5]]).is_err());
        assert!(GridSpec::new(vec![]).is_err());
    }

    #[test]
    fn point_mass_has_no_density() {
        let law = TerminalLaw::point_mass(vec![1.0, 1.0]).unwrap();
        let grid = GridSpec::uniform(&[0.9, 0.9], &[1.1, 1.1], &[2, 2]).unwrap();
        let diff = default_diff_spec(&law);
        let cfg = PricerConfig::default();
        let limit = default_limit_spec(&law);
        assert_eq!(recover_density_main(&law, &grid, &cfg, &diff).unwrap_err(), RecoveryError::NotAbsolutelyContinuous);
        assert_eq!(
            recover_density_cp(&law, &grid, PNorm::ONE, &cfg, &diff, &limit).unwrap_err(),
            RecoveryError::NotAbsolutelyContinuous
        );
        assert_eq!(recover_density_cdf(&law, &grid, &cfg, &diff).unwrap_err(), RecoveryError::NotAbsolutelyContinuous);
    }

    #[test]
    fn grid_outside_the_box_is_rejected() {
        let law = unit_square();
        let grid = GridSpec::uniform(&[0.0, 0.5], &[0.5, 0.5], &[2, 1]).unwrap();
        let err = recover_density_cdf(&law, &grid, &PricerConfig::default(), &default_diff_spec(&law)).unwrap_err();
        assert!(matches!(err, RecoveryError::InvalidGrid(_)), "{err:?}");
    }

    #[test]
    fn monte_carlo_prices_are_refused_for_densities() {
        let law = lognormal(2);
        let grid = GridSpec::uniform(&[1.0, 1.0], &[1.0, 1.0], &[1, 1]).unwrap();
        let cfg = PricerConfig::monte_carlo(10_000, "x");
        let err = recover_density_main(&law, &grid, &cfg, &default_diff_spec(&law)).unwrap_err();
        assert!(matches!(err, RecoveryError::Unsupported(_)));
    }

    #[test]
    fn cdf_route_on_uniform_square() {
        let law = unit_square();
        let grid = GridSpec::uniform(&[0.5, 0.5], &[0.5, 0.5], &[1, 1]).unwrap();
        let r = recover_density_cdf(&law, &grid, &PricerConfig::default(), &default_diff_spec(&law)).unwrap();
        assert!((r.density_grid.points[0].value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cdf_route_in_three_dimensions() {
        let law = lognormal(3);
        let grid = GridSpec::uniform(&[1.0; 3], &[1.0; 3], &[1; 3]).unwrap();
        let r = recover_density_cdf(&law, &grid, &PricerConfig::default(), &default_diff_spec(&law)).unwrap();
        let want = lognormal_pdf(1.0).powi(3);
        assert!((r.density_grid.points[0].value - want).abs() < 5e-3);
    }

    #[test]
    fn main_route_single_point() {
        let law = lognormal(2);
        let grid = GridSpec::uniform(&[1.0, 0.9], &[1.0, 0.9], &[1, 1]).unwrap();
        let r = recover_density_main(&law, &grid, &PricerConfig::default(), &default_diff_spec(&law)).unwrap();
        let pt = &r.density_grid.points[0];
        let want = lognormal_pdf(1.0) * lognormal_pdf(0.9);
        assert!((pt.value - want).abs() < 1e-2, "{} vs {want}", pt.value);
        assert!((pt.value - want).abs() <= pt.error + 1e-6, "{pt:?}");
    }

    #[test]
    fn cp_route_in_one_dimension_matches_call_curvature() {
        let law = lognormal(1);
        let grid = GridSpec::uniform(&[0.7], &[1.3], &[4]).unwrap();
        let r = recover_density_cp(
            &law,
            &grid,
            PNorm::Finite(3.0),
            &PricerConfig::default(),
            &default_diff_spec(&law),
            &default_limit_spec(&law),
        )
        .unwrap();
        for pt in &r.density_grid.points {
            let want = lognormal_pdf(pt.strikes[0]);
            assert!((pt.value - want).abs() < 1e-3, "{pt:?} vs {want}");
        }
        assert!(r.oracle_comparison.unwrap().linf < 1e-3);
    }

    #[test]
    fn n2_alternative_gate_and_identity() {
        let law = lognormal(3);
        let grid = GridSpec::uniform(&[1.0; 3], &[1.0; 3], &[1; 3]).unwrap();
        let err = recover_density_n2_alternative(
            &law,
            &grid,
            &PricerConfig::default(),
            &default_diff_spec(&law),
            &default_limit_spec(&law),
        )
        .unwrap_err();
        assert_eq!(err, RecoveryError::DimensionNotTwo(3));

        let law = unit_square();
        let grid = GridSpec::uniform(&[0.4, 0.6], &[0.4, 0.6], &[1, 1]).unwrap();
        let r = recover_density_n2_alternative(
            &law,
            &grid,
            &PricerConfig::default(),
            &default_diff_spec(&law),
            &default_limit_spec(&law),
        )
        .unwrap();
        let pt = &r.density_grid.points[0];
        assert!((pt.value - 1.0).abs() < 5e-3, "{pt:?}");
        let id = pt.identity.unwrap();
        assert!((id.joint_survival - 0.24).abs() < 1e-14);
        assert!((id.directional.value - id.joint_survival).abs() < 3e-3, "{id:?}");
    }

    #[test]
    fn survival_ladder_on_uniform_square() {
        let law = unit_square();
        let ladder: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let rungs = recover_marginal_survival(
            &law,
            0,
            &ladder,
            &[0.0, 0.0],
            &PricerConfig::default(),
            &default_diff_spec(&law),
        )
        .unwrap();
        for r in &rungs {
            assert!((r.recovered.value - (1.0 - r.strike)).abs() < 2e-3, "{r:?}");
            assert!((r.analytic - (1.0 - r.strike)).abs() < 1e-15);
        }
        let at_zero =
            recover_marginal_survival(&law, 0, &[0.0], &[0.0, 0.0], &PricerConfig::default(), &default_diff_spec(&law))
                .unwrap();
        assert!((at_zero[0].recovered.value - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sum_decomposition_cases() {
        let cfg = PricerConfig::default();
        let one = lognormal(1);
        let d = check_sum_decomposition(&one, &[0.9], PNorm::Finite(2.0), &cfg).unwrap();
        assert!(d.gap <= d.lhs.error + d.rhs.error);
        assert_eq!(d.tail_bound, 0.0);

        let two = lognormal(2);
        let d = check_sum_decomposition(&two, &[1.0, 1.0], PNorm::Infinity, &cfg).unwrap();
        assert!(d.holds, "{d:?}");

        let square = unit_square();
        let d = check_sum_decomposition(&square, &[0.5, 0.5], PNorm::Finite(2.0), &cfg).unwrap();
        assert_eq!(d.far_strikes, vec![1.0, 1.0]);
        assert_eq!(d.tail_bound, 0.0);
        assert!(d.gap <= d.lhs.error + d.rhs.error + 1e-15, "{d:?}");

        assert!(check_sum_decomposition(&two, &[1.0, 1.0], PNorm::Finite(0.5), &cfg).is_err());
    }

    #[test]
    fn breeden_litzenberger_pricing() {
        let spec = DiffSpec::central(vec![1], vec![1e-3]);
        let mass = price_by_density_1d(black_call, |_| 1.0, 1e-2, 4.0, &spec).unwrap();
        assert!((mass.value - 1.0).abs() < 1e-3, "{mass:?}");
        let mean = price_by_density_1d(black_call, |a| a, 1e-2, 4.0, &spec).unwrap();
        assert!((mean.value - 1.0).abs() < 2e-3, "{mean:?}");
        let call = price_by_density_1d(black_call, |a| (a - 1.1_f64).max(0.0), 1e-2, 4.0, &spec).unwrap();
        assert!((call.value - black_call(1.1)).abs() < 1e-3, "{call:?}");
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let law = unit_square();
        let grid = GridSpec::uniform(&[0.4, 0.4], &[0.6, 0.6], &[2, 2]).unwrap();
        let r = recover_density_cdf(&law, &grid, &PricerConfig::default(), &default_diff_spec(&law)).unwrap();
        let mut buf = Vec::new();
        r.density_grid.write_csv(&mut buf, &[("tool_version".into(), "0.1.0".into())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k1,k2,recovered,analytic,error,formula_tag,tool_version");
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn mass_matches_box_probability() {
        let law = lognormal(2);
        let grid = GridSpec::uniform(&[0.8, 0.8], &[1.2, 1.2], &[9, 9]).unwrap();
        let r = recover_density_cdf(&law, &grid, &PricerConfig::default(), &default_diff_spec(&law)).unwrap();
        let analytic = r.analytic_box_mass.unwrap();
        assert!((r.mass - analytic).abs() < 0.02, "{} vs {analytic}", r.mass);
        let rule = r.analytic_trapezoid_mass.unwrap();
        assert!((r.mass - rule).abs() < 1e-6, "{} vs {rule}", r.mass);
    }
}
