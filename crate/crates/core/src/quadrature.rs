//! Gauss–Legendre rules and piecewise composite integration on intervals.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// An `n`-point Gauss–Legendre rule on the reference interval `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on the Legendre polynomial `P_n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Shared, lazily built rule of order `n`.
    pub fn cached(n: usize) -> &'static GaussLegendre {
        static CACHE: OnceLock<Mutex<HashMap<usize, &'static GaussLegendre>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| Box::leak(Box::new(GaussLegendre::new(n))))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Maps the rule onto `[a, b]`, yielding `(abscissa, weight)` pairs.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, w * half))
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Sorted interval pieces of `[lo, hi]` after splitting at every breakpoint strictly inside.
pub fn split_interval(lo: f64, hi: f64, breakpoints: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(lo);
    let mut inner: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|b| b.is_finite() && *b > lo && *b < hi)
        .collect();
    inner.sort_by(|a, b| a.total_cmp(b));
    for b in inner {
        if b > *out.last().expect("non-empty") {
            out.push(b);
        }
    }
    out.push(hi);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in [1, 2, 5, 8, 20, 32, 64, 128] {
            let rule = GaussLegendre::new(n);
            let s: f64 = rule.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let rule = GaussLegendre::new(6);
        for deg in 0..12 {
            let got = rule.integrate(0.0, 1.0, |x| x.powi(deg));
            let want = 1.0 / (deg as f64 + 1.0);
            assert!((got - want).abs() < 1e-14, "deg {deg}: {got} vs {want}");
        }
    }

    #[test]
    fn two_point_nodes_are_known() {
        let rule = GaussLegendre::new(2);
        let x = 1.0 / 3f64.sqrt();
        assert!((rule.nodes[0] + x).abs() < 1e-15);
        assert!((rule.nodes[1] - x).abs() < 1e-15);
    }

    #[test]
    fn smooth_integrand_converges() {
        let rule = GaussLegendre::cached(64);
        let got = rule.integrate(0.0, std::f64::consts::PI, f64::sin);
        assert!((got - 2.0).abs() < 1e-14);
    }

    #[test]
    fn split_drops_outside_and_duplicate_points() {
        let mut out = Vec::new();
        split_interval(0.0, 1.0, &[0.5, -1.0, 0.5, 2.0, 0.25, f64::NAN], &mut out);
        assert_eq!(out, vec![0.0, 0.25, 0.5, 1.0]);
    }
}
