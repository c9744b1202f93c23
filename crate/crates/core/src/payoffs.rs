//! The rainbow payoff family `h_p` and its analytic one-sided derivatives.
//!
//! For `0 < p < 1` the inner expression is a quasi-norm rather than a norm;
//! evaluation is supported but convexity-based properties do not hold there.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PayoffError {
    #[error("dimension mismatch: strikes have {expected} coordinates, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("strikes must be finite and nonnegative")]
    InvalidStrike,
    #[error("p must be a positive real or infinity, got {0}")]
    InvalidExponent(String),
    #[error("directional derivative undefined: x_{0} equals its strike")]
    UndefinedOnDiagonal(usize),
    #[error("K-derivative undefined on the level set h_p(x, K̄, 0) = K")]
    UndefinedOnLevelSet,
    #[error("this derivative is defined for outer strike K = 0 only")]
    NonZeroOuterStrike,
    #[error("coordinate {index} out of range for dimension {dimension}")]
    CoordinateOutOfRange { index: usize, dimension: usize },
}

/// Exponent `p ∈ (0, ∞]` of the payoff family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PNorm {
    Finite(f64),
    Infinity,
}

impl PNorm {
    pub fn finite(p: f64) -> Result<Self, PayoffError> {
        if p.is_finite() && p > 0.0 {
            Ok(Self::Finite(p))
        } else if p == f64::INFINITY {
            Ok(Self::Infinity)
        } else {
            Err(PayoffError::InvalidExponent(p.to_string()))
        }
    }

    pub const ONE: PNorm = PNorm::Finite(1.0);

    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinity)
    }

    /// `p` as a float, `inf` for the limit payoff.
    pub fn as_f64(&self) -> f64 {
        match self {
            Self::Finite(p) => *p,
            Self::Infinity => f64::INFINITY,
        }
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(p) => write!(f, "{p}"),
            Self::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for PNorm {
    type Err = PayoffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(Self::Infinity),
            other => other
                .parse::<f64>()
                .map_err(|_| PayoffError::InvalidExponent(s.to_string()))
                .and_then(Self::finite),
        }
    }
}

impl Serialize for PNorm {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Finite(p) => s.serialize_f64(*p),
            Self::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for PNorm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => PNorm::finite(p),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Component strikes `K̄ ∈ R_+^n` and outer strike `K ∈ R_+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeSpec {
    component: Vec<f64>,
    outer: f64,
}

impl StrikeSpec {
    pub fn new(component: Vec<f64>, outer: f64) -> Result<Self, PayoffError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if component.is_empty() || !component.iter().copied().all(ok) || !ok(outer) {
            return Err(PayoffError::InvalidStrike);
        }
        Ok(Self { component, outer })
    }

    pub fn component(&self) -> &[f64] {
        &self.component
    }

    pub fn outer(&self) -> f64 {
        self.outer
    }

    pub fn dimension(&self) -> usize {
        self.component.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), PayoffError> {
        if x.len() != self.component.len() {
            return Err(PayoffError::DimensionMismatch {
                expected: self.component.len(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// `(Σ_i ((x_i - K_i)^+)^p)^(1/p)` or `max_i (x_i - K_i)^+`, with the sum
/// factored by its largest term so large `p` cannot overflow.
pub(crate) fn inner_norm(x: &[f64], component: &[f64], p: PNorm) -> f64 {
    let mut largest = 0.0_f64;
    for (xi, ki) in x.iter().zip(component) {
        largest = largest.max(xi - ki);
    }
    if largest <= 0.0 {
        return 0.0;
    }
    match p {
        PNorm::Infinity => largest,
        PNorm::Finite(1.0) => x
            .iter()
            .zip(component)
            .map(|(xi, ki)| (xi - ki).max(0.0))
            .sum(),
        PNorm::Finite(p) => {
            let s: f64 = x
                .iter()
                .zip(component)
                .map(|(xi, ki)| ((xi - ki).max(0.0) / largest).powf(p))
                .sum();
            largest * s.powf(1.0 / p)
        }
    }
}

/// `h_p(x, K̄, K)` without argument validation.
#[inline]
pub(crate) fn payoff_value(x: &[f64], component: &[f64], outer: f64, p: PNorm) -> f64 {
    (inner_norm(x, component, p) - outer).max(0.0)
}

pub fn eval_payoff(x: &[f64], strikes: &StrikeSpec, p: PNorm) -> Result<f64, PayoffError> {
    strikes.check(x)?;
    Ok(payoff_value(x, &strikes.component, strikes.outer, p))
}

/// Right derivative of `h_1(x, K̄, 0)` in `K_j`: `-1` on the closed event `x_j >= K_j`.
pub fn payoff_right_derivative_in_kj(x: &[f64], strikes: &StrikeSpec, j: usize) -> Result<f64, PayoffError> {
    strikes.check(x)?;
    if j >= x.len() {
        return Err(PayoffError::CoordinateOutOfRange { index: j, dimension: x.len() });
    }
    if strikes.outer != 0.0 {
        return Err(PayoffError::NonZeroOuterStrike);
    }
    Ok(if x[j] >= strikes.component[j] { -1.0 } else { 0.0 })
}

/// Derivative of `h_∞(x, K̄, 0)` along `(1, .., 1, 0)`: `-1` if some `x_i > K_i`.
pub fn payoff_directional_derivative_ones(x: &[f64], strikes: &StrikeSpec) -> Result<f64, PayoffError> {
    strikes.check(x)?;
    if strikes.outer != 0.0 {
        return Err(PayoffError::NonZeroOuterStrike);
    }
    if let Some(i) = x.iter().zip(&strikes.component).position(|(a, b)| a == b) {
        return Err(PayoffError::UndefinedOnDiagonal(i));
    }
    let any_above = x.iter().zip(&strikes.component).any(|(a, b)| a > b);
    Ok(if any_above { -1.0 } else { 0.0 })
}

/// `∂/∂K h_p(x, K̄, K) = -1{h_p(x, K̄, 0) > K}`.
pub fn payoff_k_derivative(x: &[f64], strikes: &StrikeSpec, p: PNorm) -> Result<f64, PayoffError> {
    strikes.check(x)?;
    let level = inner_norm(x, &strikes.component, p);
    if level == strikes.outer {
        return Err(PayoffError::UndefinedOnLevelSet);
    }
    Ok(if level > strikes.outer { -1.0 } else { 0.0 })
}
