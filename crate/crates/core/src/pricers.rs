//! Prices `V^p(K̄, K) = E_Q[h_p(X_T, K̄, K)]`.
//!
//! Deterministic prices come from iterated Gauss–Legendre cubature over the
//! marginal truncation box. Each one-dimensional level is split wherever the
//! payoff, or the integral of the remaining levels, stops being smooth, so
//! every piece sees an analytic integrand and prices are smooth in the strikes.
//! Monte Carlo prices average the payoff over one seeded sample, which makes
//! prices at different strikes share their random numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, Sample, SeedDescriptor, TerminalLaw};
use crate::payoffs::{payoff_value, PNorm, PayoffError, StrikeSpec};
use crate::quadrature::{split_interval, GaussLegendre};
use crate::Estimate;

pub const DEFAULT_NODES_PER_DIM: usize = 64;
pub const DEFAULT_TRUNCATION_QUANTILE: f64 = 1e-7;
pub const DEFAULT_SAMPLES: usize = 1_000_000;
/// Highest dimension priced by cubature.
pub const MAX_QUADRATURE_DIMENSION: usize = 3;

/// Grid-density cells are bilinear, so a short rule per cell is exact for the
/// piecewise-linear payoffs and ample for the others.
const GRID_CELL_NODES: usize = 8;
/// Smallest coarse rule whose discrepancies are trusted to decay geometrically.
const MIN_ASYMPTOTIC_NODES: usize = 8;
const MC_CHUNK: usize = 8192;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricerError {
    #[error("dimension mismatch: law has {expected} coordinates, strikes have {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("quadrature unavailable: {0}")]
    QuadratureUnavailable(String),
    #[error("invalid pricer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Payoff(#[from] PayoffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSelector {
    /// Exact for atoms, cubature up to three dimensions, Monte Carlo above.
    #[default]
    Auto,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PricingMethod {
    Quadrature,
    MonteCarlo,
    ClosedForm,
}

impl PricingMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Quadrature => "quadrature",
            Self::MonteCarlo => "monte-carlo",
            Self::ClosedForm => "closed-form",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::MonteCarlo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PricerConfig {
    pub method: MethodSelector,
    pub nodes_per_dim: usize,
    /// Marginal tail mass left outside the cubature box on each side.
    pub truncation_quantile: f64,
    pub samples: usize,
    pub seed: SeedDescriptor,
    /// Deterministic discount factor applied to every price.
    pub discount: f64,
}

impl Default for PricerConfig {
    fn default() -> Self {
        Self {
            method: MethodSelector::Auto,
            nodes_per_dim: DEFAULT_NODES_PER_DIM,
            truncation_quantile: DEFAULT_TRUNCATION_QUANTILE,
            samples: DEFAULT_SAMPLES,
            seed: SeedDescriptor::default(),
            discount: 1.0,
        }
    }
}

impl PricerConfig {
    pub fn quadrature() -> Self {
        Self { method: MethodSelector::Quadrature, ..Self::default() }
    }

    pub fn monte_carlo(samples: usize, seed: impl Into<String>) -> Self {
        Self {
            method: MethodSelector::MonteCarlo,
            samples,
            seed: SeedDescriptor::new(seed),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PricerError> {
        let bad = |m: &str| Err(PricerError::InvalidConfig(m.to_string()));
        if self.nodes_per_dim < 8 {
            return bad("nodes_per_dim must be at least 8");
        }
        if self.samples < 1000 {
            return bad("samples must be at least 1000");
        }
        if !(self.truncation_quantile > 0.0 && self.truncation_quantile <= 1e-3) {
            return bad("truncation_quantile must lie in (0, 1e-3]");
        }
        if !(self.discount.is_finite() && self.discount > 0.0) {
            return bad("discount must be positive and finite");
        }
        Ok(())
    }

    /// The concrete method used for `law`.
    pub fn resolve(&self, law: &TerminalLaw) -> Result<PricingMethod, PricerError> {
        if !law.absolutely_continuous() {
            return Ok(PricingMethod::ClosedForm);
        }
        let n = law.dimension();
        match self.method {
            MethodSelector::Auto if n <= MAX_QUADRATURE_DIMENSION => Ok(PricingMethod::Quadrature),
            MethodSelector::Auto | MethodSelector::MonteCarlo => Ok(PricingMethod::MonteCarlo),
            MethodSelector::Quadrature if n <= MAX_QUADRATURE_DIMENSION => Ok(PricingMethod::Quadrature),
            MethodSelector::Quadrature => Err(PricerError::QuadratureUnavailable(format!(
                "tensor cubature supports at most {MAX_QUADRATURE_DIMENSION} dimensions, law has {n}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PriceDiagnostics {
    /// Integrand evaluations of the cubature.
    pub nodes: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<SeedDescriptor>,
    /// Geometric-rate extrapolation of the full-, half- and quarter-rule
    /// discrepancies.
    pub cubature_error: f64,
    /// First-moment bound on the payoff mass outside the truncation box.
    pub truncation_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceEstimate {
    pub value: f64,
    pub error_bound: f64,
    pub method: PricingMethod,
    pub diagnostics: PriceDiagnostics,
}

impl PriceEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.error_bound)
    }

    /// Error that does not vary smoothly with the strikes. This is what a finite
    /// difference of neighbouring prices amplifies.
    pub fn roughness(&self) -> f64 {
        match self.method {
            PricingMethod::Quadrature => self.diagnostics.cubature_error,
            _ => self.error_bound,
        }
    }
}

pub fn price(law: &TerminalLaw, strikes: &StrikeSpec, p: PNorm, cfg: &PricerConfig) -> Result<PriceEstimate, PricerError> {
    cfg.validate()?;
    check_dimension(law, strikes.dimension())?;
    match cfg.resolve(law)? {
        PricingMethod::ClosedForm => {
            let TerminalLaw::PointMass(atom) = law else {
                unreachable!("closed form is only resolved for atoms")
            };
            let value = cfg.discount * payoff_value(atom, strikes.component(), strikes.outer(), p);
            Ok(PriceEstimate {
                value,
                error_bound: 0.0,
                method: PricingMethod::ClosedForm,
                diagnostics: PriceDiagnostics::default(),
            })
        }
        PricingMethod::Quadrature => {
            let target = Target::Payoff {
                component: strikes.component(),
                outer: strikes.outer(),
                p,
            };
            Ok(cubature_price(law, target, cfg, truncation_bound(law, cfg.truncation_quantile, p)))
        }
        PricingMethod::MonteCarlo => {
            let sample = law.sample(cfg.samples, &cfg.seed);
            price_on_sample(&sample, strikes, p, cfg.discount)
        }
    }
}

/// Monte Carlo price over a fixed sample; reusing one sample across strikes is
/// the common-random-number contract.
pub fn price_on_sample(sample: &Sample, strikes: &StrikeSpec, p: PNorm, discount: f64) -> Result<PriceEstimate, PricerError> {
    check_sample_dimension(sample, strikes.dimension())?;
    let (component, outer) = (strikes.component(), strikes.outer());
    let moments = sample_moments(sample, |x| discount * payoff_value(x, component, outer, p));
    Ok(monte_carlo_estimate(sample, moments))
}

/// `Q(X_i <= k_i for all i)` by the pricing machinery, used to cross-check
/// analytic joint CDFs.
pub fn digital_joint_price(law: &TerminalLaw, k: &[f64], cfg: &PricerConfig) -> Result<PriceEstimate, PricerError> {
    cfg.validate()?;
    check_dimension(law, k.len())?;
    if k.iter().any(|v| v.is_nan()) {
        return Err(PricerError::InvalidConfig("digital strikes must not be NaN".into()));
    }
    match cfg.resolve(law)? {
        PricingMethod::ClosedForm => Ok(PriceEstimate {
            value: cfg.discount * law.joint_cdf(k)?.value,
            error_bound: 0.0,
            method: PricingMethod::ClosedForm,
            diagnostics: PriceDiagnostics::default(),
        }),
        PricingMethod::Quadrature => {
            let (lo, hi) = law.truncation_box(cfg.truncation_quantile);
            let tail: f64 = (0..k.len())
                .map(|j| {
                    let below = law.marginal_cdf(j, lo[j]);
                    let above = if k[j] > hi[j] { law.marginal_survival_analytic(j, hi[j]).unwrap_or(0.0) } else { 0.0 };
                    below + above
                })
                .sum();
            Ok(cubature_price(law, Target::Probability { k }, cfg, cfg.discount * tail))
        }
        PricingMethod::MonteCarlo => {
            let sample = law.sample(cfg.samples, &cfg.seed);
            let discount = cfg.discount;
            let moments = sample_moments(&sample, |x| {
                if x.iter().zip(k).all(|(a, b)| a <= b) {
                    discount
                } else {
                    0.0
                }
            });
            Ok(monte_carlo_estimate(&sample, moments))
        }
    }
}

/// Prices along an increasing `p` sequence next to the directly priced limit payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLimitReport {
    pub sequence: Vec<(f64, PriceEstimate)>,
    pub direct: PriceEstimate,
    /// Linear extrapolation in `1/p` through the last two sequence prices.
    pub extrapolated: Estimate,
    /// Largest `|V^p - V^∞|` over sequence entries with `p >= 64`.
    pub tail_deviation: f64,
    /// Largest combined error bound over the same entries.
    pub tail_error: f64,
}

pub fn price_limit_p_to_infinity(
    law: &TerminalLaw,
    strikes: &StrikeSpec,
    cfg: &PricerConfig,
    p_sequence: &[f64],
) -> Result<PLimitReport, PricerError> {
    let increasing = p_sequence.windows(2).all(|w| w[0] < w[1]);
    let finite = p_sequence.iter().all(|p| p.is_finite() && *p > 0.0);
    if p_sequence.len() < 2 || !increasing || !finite || *p_sequence.last().unwrap() < 64.0 {
        return Err(PricerError::InvalidConfig(
            "p sequence must be finite, positive, strictly increasing and end at or above 64".into(),
        ));
    }
    let sequence = p_sequence
        .iter()
        .map(|&p| Ok((p, price(law, strikes, PNorm::finite(p)?, cfg)?)))
        .collect::<Result<Vec<_>, PricerError>>()?;
    let direct = price(law, strikes, PNorm::Infinity, cfg)?;
    let (p1, v1) = (&sequence[sequence.len() - 2].0, &sequence[sequence.len() - 2].1);
    let (p2, v2) = (&sequence[sequence.len() - 1].0, &sequence[sequence.len() - 1].1);
    let value = (p2 * v2.value - p1 * v1.value) / (p2 - p1);
    let noise = (p2 * v2.error_bound + p1 * v1.error_bound) / (p2 - p1);
    let extrapolated = Estimate::new(value, (value - v2.value).abs() + noise);
    let (mut tail_deviation, mut tail_error) = (0.0_f64, 0.0_f64);
    for (_, v) in sequence.iter().filter(|(p, _)| *p >= 64.0) {
        tail_deviation = tail_deviation.max((v.value - direct.value).abs());
        tail_error = tail_error.max(v.error_bound + direct.error_bound);
    }
    Ok(PLimitReport { sequence, direct, extrapolated, tail_deviation, tail_error })
}

fn check_dimension(law: &TerminalLaw, got: usize) -> Result<(), PricerError> {
    let expected = law.dimension();
    if expected != got {
        return Err(PricerError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_sample_dimension(sample: &Sample, got: usize) -> Result<(), PricerError> {
    if sample.dimension() != got {
        return Err(PricerError::DimensionMismatch { expected: sample.dimension(), got });
    }
    if sample.len() < 2 {
        return Err(PricerError::InvalidConfig("sample needs at least two draws".into()));
    }
    Ok(())
}

/// Sum and sum of squares of `f` over the sample, reduced in a fixed order so
/// results do not depend on the thread count.
fn sample_moments<F>(sample: &Sample, f: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = sample.dimension();
    let partial: Vec<(f64, f64)> = sample
        .points()
        .par_chunks(n * MC_CHUNK)
        .map(|chunk| {
            chunk.chunks_exact(n).fold((0.0, 0.0), |(s, q), x| {
                let v = f(x);
                (s + v, q + v * v)
            })
        })
        .collect();
    partial.iter().fold((0.0, 0.0), |(s, q), (a, b)| (s + a, q + b))
}

fn monte_carlo_estimate(sample: &Sample, (sum, sum_sq): (f64, f64)) -> PriceEstimate {
    let count = sample.len() as f64;
    let mean = sum / count;
    let variance = ((sum_sq - count * mean * mean) / (count - 1.0)).max(0.0);
    PriceEstimate {
        value: mean,
        error_bound: 3.0 * (variance / count).sqrt(),
        method: PricingMethod::MonteCarlo,
        diagnostics: PriceDiagnostics {
            samples: Some(sample.len()),
            seed: Some(sample.seed().clone()),
            ..PriceDiagnostics::default()
        },
    }
}

/// Bound on `E[h_p(X) 1{X outside the box}]` using `h_p(x) <= c_p Σ_j x_j`.
fn truncation_bound(law: &TerminalLaw, tail: f64, p: PNorm) -> f64 {
    let n = law.dimension();
    let (lo, hi) = law.truncation_box(tail);
    let c_p = match p {
        PNorm::Finite(p) if p < 1.0 => (n as f64).powf(1.0 / p - 1.0),
        _ => 1.0,
    };
    let outside: Vec<f64> = (0..n)
        .map(|j| law.marginal_cdf(j, lo[j]) + law.marginal_survival_analytic(j, hi[j]).unwrap_or(0.0))
        .collect();
    let total: f64 = (0..n)
        .map(|j| {
            let below = lo[j] * law.marginal_cdf(j, lo[j]);
            let above = law.marginal_call(j, hi[j]) + hi[j] * law.marginal_survival_analytic(j, hi[j]).unwrap_or(0.0);
            let others: f64 = (0..n).filter(|&i| i != j).map(|i| outside[i]).sum();
            below + above + hi[j] * others
        })
        .sum();
    c_p * total
}

#[derive(Clone, Copy)]
enum Target<'a> {
    Payoff { component: &'a [f64], outer: f64, p: PNorm },
    Probability { k: &'a [f64] },
}

fn cubature_price(law: &TerminalLaw, target: Target<'_>, cfg: &PricerConfig, truncation: f64) -> PriceEstimate {
    let per_piece = if matches!(law, TerminalLaw::GridDensity(_)) {
        GRID_CELL_NODES
    } else {
        cfg.nodes_per_dim
    };
    let (lo, mut hi) = law.truncation_box(cfg.truncation_quantile);
    if let Target::Probability { k } = target {
        for (h, kj) in hi.iter_mut().zip(k) {
            *h = h.min(*kj);
        }
    }
    let fine = Cubature::new(law, &lo, &hi, target, per_piece).integrate();
    let half = Cubature::new(law, &lo, &hi, target, per_piece / 2).integrate();
    let quarter = Cubature::new(law, &lo, &hi, target, per_piece / 4).integrate();
    // Gauss–Legendre on analytic pieces converges geometrically, so the last
    // difference shrinks by at least the previous ratio.
    let last = (fine.0 - half.0).abs();
    let previous = (half.0 - quarter.0).abs();
    let asymptotic = per_piece / 4 >= MIN_ASYMPTOTIC_NODES;
    let ratio = if asymptotic && previous > 0.0 { (last / previous).min(1.0) } else { 1.0 };
    let cubature_error = cfg.discount * last * ratio;
    PriceEstimate {
        value: cfg.discount * fine.0,
        error_bound: cubature_error + truncation,
        method: PricingMethod::Quadrature,
        diagnostics: PriceDiagnostics {
            nodes: Some(fine.1 + half.1 + quarter.1),
            cubature_error,
            truncation_bound: truncation,
            ..PriceDiagnostics::default()
        },
    }
}

/// Iterated Gauss–Legendre over a box, one coordinate per level.
struct Cubature<'a> {
    law: &'a TerminalLaw,
    lo: &'a [f64],
    hi: &'a [f64],
    target: Target<'a>,
    rule: &'static GaussLegendre,
}

impl<'a> Cubature<'a> {
    fn new(law: &'a TerminalLaw, lo: &'a [f64], hi: &'a [f64], target: Target<'a>, nodes: usize) -> Self {
        Self { law, lo, hi, target, rule: GaussLegendre::cached(nodes) }
    }

    /// Integral and number of integrand evaluations.
    fn integrate(&self) -> (f64, usize) {
        let n = self.lo.len();
        if self.lo.iter().zip(self.hi).any(|(a, b)| !(a < b)) {
            return (0.0, 0);
        }
        let pieces = self.pieces(0, &[]);
        let nodes: Vec<(f64, f64)> = pieces
            .windows(2)
            .flat_map(|w| self.rule.mapped(w[0], w[1]))
            .collect();
        let parts: Vec<(f64, usize)> = nodes
            .par_iter()
            .map(|&(x0, w)| {
                let mut x = vec![0.0; n];
                x[0] = x0;
                let (v, c) = self.level(1, &mut x);
                (w * v, c)
            })
            .collect();
        parts.iter().fold((0.0, 0), |(s, c), (v, k)| (s + v, c + k))
    }

    fn level(&self, d: usize, x: &mut [f64]) -> (f64, usize) {
        if d == x.len() {
            return (self.integrand(x), 1);
        }
        let pieces = self.pieces(d, &x[..d]);
        let mut total = 0.0;
        let mut count = 0;
        for w in pieces.windows(2) {
            for (xd, wt) in self.rule.mapped(w[0], w[1]) {
                x[d] = xd;
                let (v, c) = self.level(d + 1, x);
                total += wt * v;
                count += c;
            }
        }
        (total, count)
    }

    fn integrand(&self, x: &[f64]) -> f64 {
        match self.target {
            Target::Payoff { component, outer, p } => {
                let h = payoff_value(x, component, outer, p);
                if h == 0.0 {
                    0.0
                } else {
                    h * self.law.density_unchecked(x)
                }
            }
            Target::Probability { .. } => self.law.density_unchecked(x),
        }
    }

    /// Split points of level `d` given the outer coordinates `prior`.
    fn pieces(&self, d: usize, prior: &[f64]) -> Vec<f64> {
        let mut breaks: Vec<f64> = self.law.density_breakpoints(d).to_vec();
        if let Target::Payoff { component, outer, p } = self.target {
            payoff_breakpoints(d, prior, component, outer, p, self.lo, self.hi, &mut breaks);
        }
        let mut out = Vec::new();
        split_interval(self.lo[d], self.hi[d], &breaks, &mut out);
        out
    }
}

/// Points along `x_d` where the payoff, or its integral over the later
/// coordinates within the box, loses smoothness.
#[allow(clippy::too_many_arguments)]
fn payoff_breakpoints(
    d: usize,
    prior: &[f64],
    component: &[f64],
    outer: f64,
    p: PNorm,
    lo: &[f64],
    hi: &[f64],
    out: &mut Vec<f64>,
) {
    let n = component.len();
    let k_d = component[d];
    out.push(k_d);
    let prior_u: Vec<f64> = prior.iter().zip(component).map(|(x, k)| (x - k).max(0.0)).collect();
    let largest = prior_u.iter().copied().fold(0.0_f64, f64::max);
    // (x_j - K_j)^+ at both box faces of every later coordinate
    let faces: Vec<[f64; 2]> = (d + 1..n)
        .map(|j| [(lo[j] - component[j]).max(0.0), (hi[j] - component[j]).max(0.0)])
        .collect();
    let diagonal = |out: &mut Vec<f64>| {
        if largest > 0.0 {
            out.push(k_d + largest);
        }
        out.extend(faces.iter().flatten().filter(|v| **v > 0.0).map(|v| k_d + v));
    };
    match p {
        PNorm::Infinity => {
            if largest < outer {
                out.push(k_d + outer);
            }
            diagonal(out);
        }
        PNorm::Finite(p) => {
            if outer > 0.0 {
                // where the zero set of the payoff meets the faces of the later coordinates
                let budget = outer.powf(p) - prior_u.iter().map(|u| u.powf(p)).sum::<f64>();
                let combos = 3usize.pow(faces.len() as u32);
                for mut code in 0..combos {
                    let mut used = 0.0;
                    for face in &faces {
                        let pick = code % 3;
                        code /= 3;
                        if pick > 0 {
                            used += face[pick - 1].powf(p);
                        }
                    }
                    let rest = budget - used;
                    if rest > 0.0 {
                        out.push(k_d + rest.powf(1.0 / p));
                    }
                }
            }
            if p != 1.0 {
                diagonal(out);
                if largest > 0.0 {
                    // the norm bends on the scale `largest` near u_d = 0
                    let mut t = largest * 4.0;
                    while k_d + t < hi[d] {
                        out.push(k_d + t);
                        t *= 4.0;
                    }
                    if p > 2.0 {
                        // and on the scale `largest / p` near u_d = largest
                        for s in [1.0 / p, 4.0 / p] {
                            out.push(k_d + largest * (1.0 - s));
                            out.push(k_d + largest * (1.0 + s));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::gaussian::norm_cdf;

    fn strikes(k: &[f64], outer: f64) -> StrikeSpec {
        StrikeSpec::new(k.to_vec(), outer).unwrap()
    }

    fn lognormal_2d() -> TerminalLaw {
        TerminalLaw::independent_lognormal(vec![1.0, 1.0], vec![0.2, 0.2], 1.0).unwrap()
    }

    fn black_call(s: f64, k: f64, vol: f64, t: f64) -> f64 {
        let sd = vol * t.sqrt();
        let d1 = ((s / k).ln() + 0.5 * sd * sd) / sd;
        s * norm_cdf(d1) - k * norm_cdf(d1 - sd)
    }

    #[test]
    fn atom_is_priced_exactly() {
        let law = TerminalLaw::point_mass(vec![2.0, 2.0]).unwrap();
        let v = price(&law, &strikes(&[1.0, 1.0], 0.0), PNorm::ONE, &PricerConfig::default()).unwrap();
        assert_eq!(v.value, 2.0);
        assert_eq!(v.error_bound, 0.0);
        assert_eq!(v.method, PricingMethod::ClosedForm);
    }

    #[test]
    fn one_dimensional_lognormal_call() {
        let law = TerminalLaw::independent_lognormal(vec![1.0], vec![0.2], 1.0).unwrap();
        let v = price(&law, &strikes(&[1.0], 0.0), PNorm::ONE, &PricerConfig::quadrature()).unwrap();
        let want = black_call(1.0, 1.0, 0.2, 1.0);
        assert!((v.value - want).abs() <= v.error_bound + 1e-12, "{} vs {want}", v.value);
        assert!(v.diagnostics.cubature_error < 1e-12);
        assert!(v.error_bound < 1e-5);
    }

    #[test]
    fn uniform_box_sum_of_means() {
        let law = TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let v = price(&law, &strikes(&[0.0, 0.0], 0.0), PNorm::ONE, &PricerConfig::default()).unwrap();
        assert!((v.value - 1.0).abs() < 1e-13);
    }

    #[test]
    fn strikes_beyond_the_box_price_to_zero() {
        let law = lognormal_2d();
        let cfg = PricerConfig::default();
        let (_, hi) = law.truncation_box(cfg.truncation_quantile);
        let far = strikes(&[hi[0] + 0.1, hi[1] + 0.1], 0.0);
        for p in [PNorm::ONE, PNorm::Finite(2.0), PNorm::Infinity] {
            let v = price(&law, &far, p, &cfg).unwrap();
            assert!(v.value.abs() <= v.error_bound, "{v:?}");
        }
    }

    #[test]
    fn outer_strike_price_for_uniform_sum() {
        // E[(X1 + X2 - 1)^+] for independent U(0,1): the triangle above the
        // anti-diagonal has mean excess 1/3 and mass 1/2.
        let law = TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let v = price(&law, &strikes(&[0.0, 0.0], 1.0), PNorm::ONE, &PricerConfig::default()).unwrap();
        assert!((v.value - 1.0 / 6.0).abs() < 1e-13, "{}", v.value);
        // E[max(X1, X2)] = 2/3
        let m = price(&law, &strikes(&[0.0, 0.0], 0.0), PNorm::Infinity, &PricerConfig::default()).unwrap();
        assert!((m.value - 2.0 / 3.0).abs() < 1e-13);
        // E[(max(X1, X2) - 0.5)^+] = ∫_{0.5}^1 (1 - t^2) dt
        let m = price(&law, &strikes(&[0.0, 0.0], 0.5), PNorm::Infinity, &PricerConfig::default()).unwrap();
        assert!((m.value - (0.5 - (1.0 - 0.125) / 3.0)).abs() < 1e-13);
    }

    #[test]
    fn euclidean_payoff_on_uniform_square() {
        // E[|X|] for X uniform on the unit square, closed form
        let want = (2.0_f64.sqrt() + (1.0 + 2.0_f64.sqrt()).ln()) / 3.0;
        let law = TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let v = price(&law, &strikes(&[0.0, 0.0], 0.0), PNorm::Finite(2.0), &PricerConfig::default()).unwrap();
        assert!((v.value - want).abs() < 1e-10, "{} vs {want}", v.value);
        assert!((v.value - want).abs() <= v.error_bound, "{v:?}");
    }

    #[test]
    fn digital_prices() {
        let cfg = PricerConfig::default();
        let unit = TerminalLaw::uniform_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((digital_joint_price(&unit, &[1.0, 1.0], &cfg).unwrap().value - 1.0).abs() < 1e-14);
        assert!((digital_joint_price(&unit, &[0.5, 1.0], &cfg).unwrap().value - 0.5).abs() < 1e-14);
        let law = lognormal_2d();
        let d = digital_joint_price(&law, &[1.0, 1.0], &cfg).unwrap();
        let marginal = norm_cdf(0.1);
        assert!((d.value - marginal * marginal).abs() <= d.error_bound + 1e-12);
        assert!(d.error_bound < 1e-6);
    }

    #[test]
    fn quadrature_refused_above_three_dimensions() {
        let law = TerminalLaw::independent_lognormal(vec![1.0; 4], vec![0.2; 4], 1.0).unwrap();
        let err = price(&law, &strikes(&[1.0; 4], 0.0), PNorm::ONE, &PricerConfig::quadrature()).unwrap_err();
        assert!(matches!(err, PricerError::QuadratureUnavailable(_)));
        let cfg = PricerConfig { samples: 20_000, ..PricerConfig::default() };
        let v = price(&law, &strikes(&[1.0; 4], 0.0), PNorm::ONE, &cfg).unwrap();
        assert_eq!(v.method, PricingMethod::MonteCarlo);
    }

    #[test]
    fn dimension_and_config_errors() {
        let law = lognormal_2d();
        let err = price(&law, &strikes(&[1.0], 0.0), PNorm::ONE, &PricerConfig::default()).unwrap_err();
        assert_eq!(err, PricerError::DimensionMismatch { expected: 2, got: 1 });
        let bad = PricerConfig { nodes_per_dim: 4, ..PricerConfig::default() };
        assert!(matches!(bad.validate(), Err(PricerError::InvalidConfig(_))));
        let bad = PricerConfig { samples: 10, ..PricerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PricerConfig { truncation_quantile: 0.01, ..PricerConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn monte_carlo_reuses_its_sample() {
        let law = lognormal_2d();
        let cfg = PricerConfig::monte_carlo(50_000, "crn");
        let a = price(&law, &strikes(&[1.0, 1.0], 0.0), PNorm::ONE, &cfg).unwrap();
        let b = price(&law, &strikes(&[1.0, 1.0], 0.0), PNorm::ONE, &cfg).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        // same draws: the shifted price equals the payoff average over that sample
        let sample = law.sample(cfg.samples, &cfg.seed);
        let shifted = strikes(&[1.1, 1.0], 0.0);
        let direct = price(&law, &shifted, PNorm::ONE, &cfg).unwrap();
        let manual: f64 = sample.rows().map(|x| payoff_value(x, &[1.1, 1.0], 0.0, PNorm::ONE)).sum::<f64>()
            / sample.len() as f64;
        assert!((direct.value - manual).abs() < 1e-12);
        assert_eq!(direct.diagnostics.seed, Some(cfg.seed.clone()));
    }

    #[test]
    fn quadrature_and_monte_carlo_agree() {
        let law = lognormal_2d();
        let mc = PricerConfig::monte_carlo(200_000, "agree");
        for k in [0.9, 1.0, 1.1] {
            for p in [PNorm::ONE, PNorm::Infinity] {
                let s = strikes(&[k, 1.0], 0.0);
                let q = price(&law, &s, p, &PricerConfig::default()).unwrap();
                let m = price(&law, &s, p, &mc).unwrap();
                assert!((q.value - m.value).abs() <= q.error_bound + m.error_bound, "{k} {p}: {} vs {}", q.value, m.value);
            }
        }
    }

    #[test]
    fn p_limit_on_an_atom() {
        let law = TerminalLaw::point_mass(vec![3.0, 2.0]).unwrap();
        let seq: Vec<f64> = (0..8).map(|i| 2f64.powi(i)).collect();
        let r = price_limit_p_to_infinity(&law, &strikes(&[1.0, 1.0], 0.0), &PricerConfig::default(), &seq).unwrap();
        assert_eq!(r.sequence[0].1.value, 3.0);
        assert!((r.sequence[1].1.value - 5f64.sqrt()).abs() < 1e-14);
        assert!(r.sequence.windows(2).all(|w| w[1].1.value <= w[0].1.value));
        assert_eq!(r.direct.value, 2.0);
        assert!(r.tail_deviation < 2.0 * (2f64.powf(1.0 / 64.0) - 1.0));
        assert!(price_limit_p_to_infinity(&law, &strikes(&[1.0, 1.0], 0.0), &PricerConfig::default(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn p_limit_collapses_in_one_dimension() {
        let law = TerminalLaw::independent_lognormal(vec![1.0], vec![0.2], 1.0).unwrap();
        let seq = [1.0, 2.0, 8.0, 64.0];
        let r = price_limit_p_to_infinity(&law, &strikes(&[0.9], 0.0), &PricerConfig::default(), &seq).unwrap();
        for (_, v) in &r.sequence {
            assert!((v.value - r.direct.value).abs() <= v.error_bound + r.direct.error_bound);
        }
    }

    #[test]
    fn p_limit_for_lognormal_pair() {
        let law = lognormal_2d();
        let seq = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
        let r = price_limit_p_to_infinity(&law, &strikes(&[1.0, 1.0], 0.0), &PricerConfig::default(), &seq).unwrap();
        let (_, v128) = r.sequence.last().unwrap();
        let gap = (2f64.powf(1.0 / 128.0) - 1.0) * r.direct.value;
        assert!((v128.value - r.direct.value).abs() <= v128.error_bound + r.direct.error_bound + gap);
        assert!(r.sequence.windows(2).all(|w| w[1].1.value <= w[0].1.value + w[0].1.error_bound + w[1].1.error_bound));
    }

    #[test]
    fn discount_scales_prices() {
        let law = lognormal_2d();
        let s = strikes(&[1.0, 1.0], 0.0);
        let plain = price(&law, &s, PNorm::ONE, &PricerConfig::default()).unwrap();
        let cfg = PricerConfig { discount: 0.9, ..PricerConfig::default() };
        let d = price(&law, &s, PNorm::ONE, &cfg).unwrap();
        assert!((d.value - 0.9 * plain.value).abs() < 1e-14);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PricerConfig::monte_carlo(5000, "abc");
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PricerConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: PricerConfig = serde_json::from_str(r#"{"method": "quadrature"}"#).unwrap();
        assert_eq!(partial.nodes_per_dim, DEFAULT_NODES_PER_DIM);
    }
}
