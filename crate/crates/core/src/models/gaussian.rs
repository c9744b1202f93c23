//! Standard normal helpers and Gaussian orthant probabilities.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::quadrature::{split_interval, GaussLegendre};

/// Integration cutoff in standard-normal units; `Φ(-9)` is about `1e-19`.
const Z_CUTOFF: f64 = 9.0;
const PANEL_WIDTH: f64 = 1.0;
const PANEL_NODES: usize = 16;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of [`norm_cdf`], polished with Newton steps against it.
pub fn norm_quantile(q: f64) -> f64 {
    let mut z = Normal::standard().inverse_cdf(q);
    if !z.is_finite() {
        return z;
    }
    for _ in 0..3 {
        let step = (norm_cdf(z) - q) / norm_pdf(z);
        z -= step;
        if step.abs() <= 1e-15 * z.abs().max(1.0) {
            break;
        }
    }
    z
}

/// `P(L W <= a)` for `W` standard normal in `a.len()` dimensions and `L` lower triangular.
///
/// Conditions on the leading coordinates and integrates them out with panelled
/// Gauss–Legendre; the last coordinate is closed-form. Intended for `n <= 3`.
pub fn orthant_probability(chol: &[Vec<f64>], a: &[f64]) -> f64 {
    let n = a.len();
    if a.contains(&f64::NEG_INFINITY) {
        return 0.0;
    }
    if is_diagonal(chol) {
        return a
            .iter()
            .enumerate()
            .map(|(i, ai)| norm_cdf(ai / chol[i][i]))
            .product();
    }
    let mut w = vec![0.0; n];
    conditional(chol, a, 0, &mut w)
}

fn is_diagonal(chol: &[Vec<f64>]) -> bool {
    chol.iter()
        .enumerate()
        .all(|(i, row)| row.iter().take(i).all(|v| *v == 0.0))
}

fn conditional(chol: &[Vec<f64>], a: &[f64], level: usize, w: &mut Vec<f64>) -> f64 {
    let n = a.len();
    let shift: f64 = (0..level).map(|i| chol[level][i] * w[i]).sum();
    let upper = (a[level] - shift) / chol[level][level];
    if level + 1 == n {
        return norm_cdf(upper);
    }
    if upper <= -Z_CUTOFF {
        return 0.0;
    }
    let upper = upper.min(Z_CUTOFF);

    // The next level's integrand turns over where its own upper limit crosses zero.
    let mut breaks = Vec::new();
    let coef = chol[level + 1][level];
    if coef != 0.0 {
        let rest: f64 = (0..level).map(|i| chol[level + 1][i] * w[i]).sum();
        breaks.push((a[level + 1] - rest) / coef);
    }
    let panels = ((upper + Z_CUTOFF) / PANEL_WIDTH).ceil().max(1.0) as usize;
    let step = (upper + Z_CUTOFF) / panels as f64;
    breaks.extend((1..panels).map(|k| -Z_CUTOFF + k as f64 * step));
    let mut pieces = Vec::new();
    split_interval(-Z_CUTOFF, upper, &breaks, &mut pieces);

    let rule = GaussLegendre::cached(PANEL_NODES);
    let mut total = 0.0;
    for piece in pieces.windows(2) {
        for (x, wt) in rule.mapped(piece[0], piece[1]) {
            w[level] = x;
            total += wt * norm_pdf(x) * conditional(chol, a, level + 1, w);
        }
    }
    total
}
