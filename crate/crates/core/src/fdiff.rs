//! Finite-difference operators on strike functions: tensor-product mixed
//! partials, one-sided derivatives, directional derivatives and `K -> 0+` limits.
//!
//! Every operator returns an [`Estimate`] whose error combines the Richardson
//! (or sequence) discrepancy with the declared evaluation noise propagated
//! through the stencil weights. Noise grows like `ε / h^k` for an order-`k`
//! stencil, so total orders of two or more need deterministic prices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Estimate;

pub const DEFAULT_RELATIVE_STEP: f64 = 1e-2;
pub const DEFAULT_RIGHT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_MAX_HALVINGS: usize = 20;

/// Relative rounding noise charged to every function evaluation.
const ROUNDING: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdiffError {
    #[error("stencil leaves the admissible domain in coordinate {coordinate} (node {node})")]
    StencilOutOfDomain { coordinate: usize, node: f64 },
    #[error("function returned a non-finite value at {at:?}")]
    NonFiniteEvaluation { at: Vec<f64> },
    #[error("one-sided quotients did not stabilise (last gap {last_gap:e})")]
    NoStabilization { last_gap: f64 },
    #[error("invalid difference specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Central,
    Right,
}

/// Stencil description for one derivative request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffSpec {
    /// Derivative order per coordinate, each 0 or 1.
    pub orders: Vec<u8>,
    pub scheme: Scheme,
    /// Full stencil width per coordinate at the coarsest level.
    pub base_step: Vec<f64>,
    pub richardson_levels: usize,
    /// Absolute noise of a single evaluation of the differenced function.
    #[serde(default)]
    pub evaluation_noise: f64,
    /// Stabilisation threshold for one-sided quotients.
    #[serde(default = "default_right_tolerance")]
    pub right_tolerance: f64,
    #[serde(default = "default_max_halvings")]
    pub max_halvings: usize,
    /// Admissible domain; unbounded when absent.
    #[serde(default)]
    pub lower_bounds: Option<Vec<f64>>,
    #[serde(default)]
    pub upper_bounds: Option<Vec<f64>>,
}

fn default_right_tolerance() -> f64 {
    DEFAULT_RIGHT_TOLERANCE
}

fn default_max_halvings() -> usize {
    DEFAULT_MAX_HALVINGS
}

impl DiffSpec {
    /// Central tensor stencil with one Richardson level.
    pub fn central(orders: Vec<u8>, base_step: Vec<f64>) -> Self {
        Self {
            orders,
            scheme: Scheme::Central,
            base_step,
            richardson_levels: 1,
            evaluation_noise: 0.0,
            right_tolerance: DEFAULT_RIGHT_TOLERANCE,
            max_halvings: DEFAULT_MAX_HALVINGS,
            lower_bounds: None,
            upper_bounds: None,
        }
    }

    /// Right quotient in coordinate `j` of a `dim`-variate function.
    pub fn right(dim: usize, j: usize, step: f64) -> Self {
        let mut orders = vec![0; dim];
        if j < dim {
            orders[j] = 1;
        }
        Self {
            scheme: Scheme::Right,
            richardson_levels: 0,
            ..Self::central(orders, vec![step; dim])
        }
    }

    /// Same steps for every coordinate, all orders zero; callers set orders per request.
    pub fn uniform(dim: usize, step: f64) -> Self {
        Self::central(vec![0; dim], vec![step; dim])
    }

    pub fn with_orders(mut self, orders: Vec<u8>) -> Self {
        self.orders = orders;
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.richardson_levels = levels;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.evaluation_noise = noise;
        self
    }

    pub fn with_lower_bounds(mut self, lower: Vec<f64>) -> Self {
        self.lower_bounds = Some(lower);
        self
    }

    pub fn with_upper_bounds(mut self, upper: Vec<f64>) -> Self {
        self.upper_bounds = Some(upper);
        self
    }

    pub fn with_right_tolerance(mut self, tol: f64) -> Self {
        self.right_tolerance = tol;
        self
    }

    pub fn total_order(&self) -> usize {
        self.orders.iter().map(|o| *o as usize).sum()
    }

    pub fn validate(&self, dim: usize) -> Result<(), FdiffError> {
        let bad = |m: &str| Err(FdiffError::InvalidSpec(m.to_string()));
        if self.orders.len() != dim || self.base_step.len() != dim {
            return bad("orders and base_step must match the point dimension");
        }
        if self.orders.iter().any(|o| *o > 1) {
            return bad("per-coordinate orders must be 0 or 1");
        }
        if self.total_order() == 0 {
            return bad("total order must be at least 1");
        }
        if self.base_step.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return bad("base steps must be positive");
        }
        if self.scheme == Scheme::Right && self.total_order() != 1 {
            return bad("the right scheme supports single-coordinate first derivatives only");
        }
        if !(self.right_tolerance > 0.0) || !(self.evaluation_noise >= 0.0) {
            return bad("tolerance must be positive and noise nonnegative");
        }
        for b in [&self.lower_bounds, &self.upper_bounds].into_iter().flatten() {
            if b.len() != dim {
                return bad("domain bounds must match the point dimension");
            }
        }
        Ok(())
    }

    fn check_node(&self, x: &[f64]) -> Result<(), FdiffError> {
        for (i, v) in x.iter().enumerate() {
            let below = self.lower_bounds.as_ref().is_some_and(|l| *v < l[i]);
            let above = self.upper_bounds.as_ref().is_some_and(|u| *v > u[i]);
            if below || above {
                return Err(FdiffError::StencilOutOfDomain { coordinate: i, node: *v });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extrapolation {
    None,
    LinearInK,
}

/// Decreasing positive sequence `K^(m) -> 0` for one-sided limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSpec {
    shrink_sequence: Vec<f64>,
    pub extrapolation: Extrapolation,
}

impl LimitSpec {
    pub fn new(shrink_sequence: Vec<f64>, extrapolation: Extrapolation) -> Result<Self, FdiffError> {
        if shrink_sequence.len() < 2 {
            return Err(FdiffError::InvalidSpec("shrink sequence needs at least two terms".into()));
        }
        if shrink_sequence.iter().any(|k| !(k.is_finite() && *k > 0.0))
            || shrink_sequence.windows(2).any(|w| !(w[1] < w[0]))
        {
            return Err(FdiffError::InvalidSpec(
                "shrink sequence must be strictly decreasing and positive".into(),
            ));
        }
        Ok(Self { shrink_sequence, extrapolation })
    }

    /// `start, start * ratio, ..` with `terms` entries.
    pub fn geometric(start: f64, ratio: f64, terms: usize, extrapolation: Extrapolation) -> Result<Self, FdiffError> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(FdiffError::InvalidSpec("ratio must lie in (0, 1)".into()));
        }
        Self::new((0..terms).map(|m| start * ratio.powi(m as i32)).collect(), extrapolation)
    }

    /// Six halvings from `0.1 * scale`, linearly extrapolated.
    pub fn default_for_scale(scale: f64) -> Self {
        Self::geometric(0.1 * scale, 0.5, 6, Extrapolation::LinearInK).expect("valid default")
    }

    pub fn shrink_sequence(&self) -> &[f64] {
        &self.shrink_sequence
    }

    pub fn smallest(&self) -> f64 {
        *self.shrink_sequence.last().expect("non-empty")
    }
}

/// A derivative split into its truncation part and its propagated-noise part.
///
/// When derivatives are nested, the discrepancy of the inner operator varies
/// smoothly with the outer stencil and must not be amplified as noise; pass
/// [`DiffEstimate::noisy`] to the outer operator instead of the full estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffEstimate {
    pub value: f64,
    pub discrepancy: f64,
    pub noise: f64,
}

impl DiffEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.value, self.discrepancy + self.noise)
    }

    pub fn noisy(&self) -> Estimate {
        Estimate::new(self.value, self.noise)
    }
}

fn evaluate<F, E>(f: &mut F, x: &[f64]) -> Result<Estimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    let est = f(x)?;
    if !est.value.is_finite() || !est.error.is_finite() {
        return Err(FdiffError::NonFiniteEvaluation { at: x.to_vec() }.into());
    }
    Ok(est)
}

/// Tensor central difference over the `active` coordinates at full widths `steps`.
/// Returns the quotient and the propagated evaluation noise.
fn central_stencil<F, E>(
    f: &mut F,
    point: &[f64],
    active: &[usize],
    steps: &[f64],
    spec: &DiffSpec,
) -> Result<(f64, f64), E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    let k = active.len();
    let mut x = point.to_vec();
    let mut sum = 0.0;
    let mut noise = 0.0;
    for mask in 0..(1usize << k) {
        let mut sign = 1.0;
        for (bit, &i) in active.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                x[i] = point[i] + 0.5 * steps[i];
            } else {
                x[i] = point[i] - 0.5 * steps[i];
                sign = -sign;
            }
        }
        spec.check_node(&x)?;
        let e = evaluate(f, &x)?;
        sum += sign * e.value;
        noise += e.error + spec.evaluation_noise + ROUNDING * e.value.abs();
    }
    let volume: f64 = active.iter().map(|&i| steps[i]).product();
    Ok((sum / volume, noise / volume))
}

/// Richardson tableau over step halvings of an `h^2`-expansion quotient.
fn richardson<G, E>(levels: usize, mut quotient: G) -> Result<DiffEstimate, E>
where
    G: FnMut(f64) -> Result<(f64, f64), E>,
{
    let rows = levels.max(1) + 1;
    let mut value = vec![vec![0.0; rows]; rows];
    let mut noise = vec![vec![0.0; rows]; rows];
    for m in 0..rows {
        let (v, n) = quotient(0.5f64.powi(m as i32))?;
        value[m][0] = v;
        noise[m][0] = n;
        for j in 1..=m {
            let factor = 4f64.powi(j as i32);
            value[m][j] = value[m][j - 1] + (value[m][j - 1] - value[m - 1][j - 1]) / (factor - 1.0);
            noise[m][j] = (factor * noise[m][j - 1] + noise[m - 1][j - 1]) / (factor - 1.0);
        }
    }
    if levels == 0 {
        // D0 - D1 is three quarters of the leading error of D0
        let discrepancy = (value[0][0] - value[1][0]).abs() * 4.0 / 3.0;
        return Ok(DiffEstimate { value: value[0][0], discrepancy, noise: noise[0][0] });
    }
    // The last correction bounds the error of T[L][L-1], hence of T[L][L].
    let l = levels;
    let discrepancy = (value[l][l] - value[l][l - 1]).abs();
    Ok(DiffEstimate { value: value[l][l], discrepancy, noise: noise[l][l] })
}

/// Mixed partial of `f` given as value-with-error; inner errors propagate as noise.
pub fn mixed_partial_est<F, E>(f: F, point: &[f64], spec: &DiffSpec) -> Result<Estimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    mixed_partial_parts(f, point, spec).map(|d| d.estimate())
}

pub fn mixed_partial_parts<F, E>(mut f: F, point: &[f64], spec: &DiffSpec) -> Result<DiffEstimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    spec.validate(point.len())?;
    if spec.scheme == Scheme::Right {
        let j = spec.orders.iter().position(|o| *o == 1).expect("validated order");
        return right_quotients(f, point, j, spec);
    }
    let active: Vec<usize> = (0..point.len()).filter(|&i| spec.orders[i] == 1).collect();
    richardson(spec.richardson_levels, |scale| {
        let steps: Vec<f64> = spec.base_step.iter().map(|h| h * scale).collect();
        central_stencil(&mut f, point, &active, &steps, spec)
    })
}

/// Tensor-product central mixed partial with Richardson extrapolation.
pub fn mixed_partial<F>(mut f: F, point: &[f64], spec: &DiffSpec) -> Result<Estimate, FdiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    mixed_partial_est(|x: &[f64]| Ok::<_, FdiffError>(Estimate::exact(f(x))), point, spec)
}

/// One-sided quotients along step halvings; returns the first quotient within
/// `right_tolerance` of its predecessor.
pub fn right_derivative_est<F, E>(f: F, point: &[f64], j: usize, spec: &DiffSpec) -> Result<Estimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    right_quotients(f, point, j, spec).map(|d| d.estimate())
}

fn right_quotients<F, E>(mut f: F, point: &[f64], j: usize, spec: &DiffSpec) -> Result<DiffEstimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    if j >= point.len() || spec.base_step.len() != point.len() {
        return Err(FdiffError::InvalidSpec("coordinate or step dimension out of range".into()).into());
    }
    if !(spec.base_step[j] > 0.0) {
        return Err(FdiffError::InvalidSpec("base step must be positive".into()).into());
    }
    spec.check_node(point)?;
    let base = evaluate(&mut f, point)?;
    let base_noise = base.error + spec.evaluation_noise + ROUNDING * base.value.abs();
    let mut x = point.to_vec();
    let mut previous: Option<f64> = None;
    let mut last_gap = f64::INFINITY;
    for m in 0..=spec.max_halvings {
        let h = spec.base_step[j] * 0.5f64.powi(m as i32);
        x[j] = point[j] + h;
        spec.check_node(&x)?;
        let bumped = evaluate(&mut f, &x)?;
        let q = (bumped.value - base.value) / h;
        let noise = (base_noise + bumped.error + spec.evaluation_noise + ROUNDING * bumped.value.abs()) / h;
        if let Some(prev) = previous {
            last_gap = (q - prev).abs();
            if last_gap <= spec.right_tolerance {
                return Ok(DiffEstimate { value: q, discrepancy: last_gap, noise });
            }
        }
        previous = Some(q);
    }
    Err(FdiffError::NoStabilization { last_gap }.into())
}

pub fn right_derivative<F>(mut f: F, point: &[f64], j: usize, spec: &DiffSpec) -> Result<Estimate, FdiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    right_derivative_est(|x: &[f64]| Ok::<_, FdiffError>(Estimate::exact(f(x))), point, j, spec)
}

/// Central derivative along `direction` (not normalised): `∇f · direction` for smooth `f`.
///
/// The coarsest ray step is the largest `t` keeping every coordinate move within
/// its `base_step`.
pub fn directional_derivative_est<F, E>(
    f: F,
    point: &[f64],
    direction: &[f64],
    spec: &DiffSpec,
) -> Result<Estimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    directional_derivative_parts(f, point, direction, spec).map(|d| d.estimate())
}

pub fn directional_derivative_parts<F, E>(
    mut f: F,
    point: &[f64],
    direction: &[f64],
    spec: &DiffSpec,
) -> Result<DiffEstimate, E>
where
    F: FnMut(&[f64]) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    let n = point.len();
    if direction.len() != n || spec.base_step.len() != n {
        return Err(FdiffError::InvalidSpec("direction and steps must match the point dimension".into()).into());
    }
    if direction.iter().all(|d| *d == 0.0) || direction.iter().any(|d| !d.is_finite()) {
        return Err(FdiffError::InvalidSpec("direction must be finite and nonzero".into()).into());
    }
    let t0 = direction
        .iter()
        .zip(&spec.base_step)
        .filter(|(d, _)| **d != 0.0)
        .map(|(d, h)| h / d.abs())
        .fold(f64::INFINITY, f64::min);
    if !(t0 > 0.0 && t0.is_finite()) {
        return Err(FdiffError::InvalidSpec("base steps must be positive".into()).into());
    }
    let mut x = vec![0.0; n];
    richardson(spec.richardson_levels, |scale| {
        let t = t0 * scale;
        let mut sum = 0.0;
        let mut noise = 0.0;
        for sign in [1.0, -1.0] {
            for i in 0..n {
                x[i] = point[i] + sign * 0.5 * t * direction[i];
            }
            spec.check_node(&x)?;
            let e = evaluate(&mut f, &x)?;
            sum += sign * e.value;
            noise += e.error + spec.evaluation_noise + ROUNDING * e.value.abs();
        }
        Ok((sum / t, noise / t))
    })
}

pub fn directional_derivative<F>(
    mut f: F,
    point: &[f64],
    direction: &[f64],
    spec: &DiffSpec,
) -> Result<Estimate, FdiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    directional_derivative_est(
        |x: &[f64]| Ok::<_, FdiffError>(Estimate::exact(f(x))),
        point,
        direction,
        spec,
    )
}

/// `lim_{K -> 0+} g(K)` from the tail of the shrink sequence.
///
/// Without extrapolation this is `g` at the smallest `K`; with linear
/// extrapolation it is the straight line through the last two points,
/// evaluated at zero. The error is the change from the previous such value plus
/// the propagated errors of `g`.
pub fn limit_k_to_zero_est<G, E>(mut g: G, spec: &LimitSpec) -> Result<Estimate, E>
where
    G: FnMut(f64) -> Result<Estimate, E>,
    E: From<FdiffError>,
{
    let seq = &spec.shrink_sequence;
    let needed = match spec.extrapolation {
        Extrapolation::None => 2,
        Extrapolation::LinearInK => 3.min(seq.len()),
    };
    let tail = &seq[seq.len() - needed..];
    let mut values = Vec::with_capacity(needed);
    for &k in tail {
        let e = g(k)?;
        if !e.value.is_finite() || !e.error.is_finite() {
            return Err(FdiffError::NonFiniteEvaluation { at: vec![k] }.into());
        }
        values.push(e);
    }
    let last = needed - 1;
    match spec.extrapolation {
        Extrapolation::None => {
            let gap = (values[last].value - values[last - 1].value).abs();
            Ok(Estimate::new(values[last].value, gap + values[last].error))
        }
        Extrapolation::LinearInK => {
            let line = |a: usize, b: usize| {
                let (ka, kb) = (tail[a], tail[b]);
                let wa = -kb / (ka - kb);
                let wb = ka / (ka - kb);
                let value = wa * values[a].value + wb * values[b].value;
                let noise = wa.abs() * values[a].error + wb.abs() * values[b].error;
                (value, noise)
            };
            let (value, noise) = line(last - 1, last);
            let change = if needed >= 3 {
                (value - line(last - 2, last - 1).0).abs()
            } else {
                (value - values[last].value).abs()
            };
            Ok(Estimate::new(value, change + noise))
        }
    }
}

pub fn limit_k_to_zero<G>(mut g: G, spec: &LimitSpec) -> Result<Estimate, FdiffError>
where
    G: FnMut(f64) -> f64,
{
    limit_k_to_zero_est(|k| Ok::<_, FdiffError>(Estimate::exact(g(k))), spec)
}
