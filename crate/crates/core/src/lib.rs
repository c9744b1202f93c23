//! Recovery of multidimensional state-price densities from rainbow option prices.
//!
//! The payoff family is
//! `h_p(x, K̄, K) = ((Σ_i ((x_i - K_i)^+)^p)^(1/p) - K)^+` together with its
//! `p -> ∞` limit `(max_i (x_i - K_i)^+ - K)^+`. Prices `V^p(K̄, K) = E_Q[h_p]`
//! are computed by kink-split Gauss–Legendre cubature or common-random-number
//! Monte Carlo, and the density `dQ/dm` is recovered from mixed strike
//! derivatives of those prices.
//!
//! Modules:
//! - [`models`]: analytic terminal laws used as inputs and oracles
//! - [`payoffs`]: `h_p`, `h_∞` and their analytic one-sided derivatives
//! - [`pricers`]: `V^p` by quadrature, Monte Carlo, or exact atom evaluation
//! - [`fdiff`]: finite-difference operators with Richardson extrapolation
//! - [`recovery`]: density and probability recovery formulas
//! - [`cli`]: the `rainbow-density` command line front end

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod fdiff;
pub mod models;
pub mod payoffs;
pub mod pricers;
pub mod quadrature;
pub mod recovery;

use serde::{Deserialize, Serialize};

/// A numerical value with an absolute error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn new(value: f64, error: f64) -> Self {
        Self { value, error }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, error: 0.0 }
    }

    /// Whether `other` lies within this estimate's error bar.
    pub fn contains(&self, other: f64) -> bool {
        (self.value - other).abs() <= self.error
    }
}
