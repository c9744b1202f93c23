use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::gaussian::{norm_cdf, norm_quantile, orthant_probability};
use super::ModelError;

/// Joint law of `X_i = S0_i exp(s_i Z_i - s_i^2 / 2)` with `s_i = sigma_i sqrt(T)` and
/// `Z ~ N(0, rho)`. Each marginal has mean `S0_i`.
#[derive(Debug, Clone)]
pub struct CorrelatedLognormal {
    spot: Vec<f64>,
    vol: Vec<f64>,
    correlation: Vec<Vec<f64>>,
    maturity: f64,
    chol: Vec<Vec<f64>>,
    precision: Vec<Vec<f64>>,
    log_norm: f64,
}

impl CorrelatedLognormal {
    pub fn new(
        spot: Vec<f64>,
        vol: Vec<f64>,
        correlation: Vec<Vec<f64>>,
        maturity: f64,
    ) -> Result<Self, ModelError> {
        let n = spot.len();
        if n == 0 {
            return Err(ModelError::invalid("lognormal dimension must be positive"));
        }
        if vol.len() != n || correlation.len() != n || correlation.iter().any(|r| r.len() != n) {
            return Err(ModelError::invalid(
                "spot, vol and correlation dimensions disagree",
            ));
        }
        if spot.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ModelError::invalid("spot prices must be strictly positive"));
        }
        if vol.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ModelError::invalid("volatilities must be strictly positive"));
        }
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(ModelError::invalid("maturity must be positive"));
        }
        for i in 0..n {
            if (correlation[i][i] - 1.0).abs() > 1e-12 {
                return Err(ModelError::invalid("correlation diagonal must be 1"));
            }
            for j in 0..i {
                if (correlation[i][j] - correlation[j][i]).abs() > 1e-12 {
                    return Err(ModelError::invalid("correlation matrix must be symmetric"));
                }
            }
        }
        let m = DMatrix::from_fn(n, n, |i, j| correlation[i][j]);
        let chol = m
            .cholesky()
            .ok_or_else(|| ModelError::invalid("correlation matrix must be positive definite"))?;
        let l = chol.l();
        let inv = chol.inverse();
        let log_det: f64 = (0..n).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let log_norm = 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det;
        Ok(Self {
            chol: (0..n).map(|i| (0..n).map(|j| l[(i, j)]).collect()).collect(),
            precision: (0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect(),
            spot,
            vol,
            correlation,
            maturity,
            log_norm,
        })
    }

    /// Independent components with the given spots and volatilities.
    pub fn independent(spot: Vec<f64>, vol: Vec<f64>, maturity: f64) -> Result<Self, ModelError> {
        let n = spot.len();
        let corr = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(spot, vol, corr, maturity)
    }

    pub fn dimension(&self) -> usize {
        self.spot.len()
    }

    pub fn spot(&self) -> &[f64] {
        &self.spot
    }

    pub fn vol(&self) -> &[f64] {
        &self.vol
    }

    pub fn correlation(&self) -> &[Vec<f64>] {
        &self.correlation
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    fn total_sd(&self, j: usize) -> f64 {
        self.vol[j] * self.maturity.sqrt()
    }

    /// Standardised log coordinate of level `x` for asset `j`.
    fn z(&self, j: usize, x: f64) -> f64 {
        let s = self.total_sd(j);
        ((x / self.spot[j]).ln() + 0.5 * s * s) / s
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| *v <= 0.0) {
            return 0.0;
        }
        let n = self.dimension();
        let mut stack = [0.0; 8];
        let mut heap = Vec::new();
        let z: &mut [f64] = if n <= stack.len() {
            &mut stack[..n]
        } else {
            heap.resize(n, 0.0);
            &mut heap
        };
        for j in 0..n {
            z[j] = self.z(j, x[j]);
        }
        let mut quad = 0.0;
        let mut jac = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.precision[i][j] * z[j];
            }
            quad += z[i] * row;
            jac += (x[i] * self.total_sd(i)).ln();
        }
        (-0.5 * quad - self.log_norm - jac).exp()
    }

    /// Deterministic joint CDF; callers route `n > 3` elsewhere.
    pub fn joint_cdf(&self, k: &[f64]) -> f64 {
        if k.iter().any(|v| *v <= 0.0) {
            return 0.0;
        }
        let a: Vec<f64> = (0..self.dimension()).map(|j| self.z(j, k[j])).collect();
        orthant_probability(&self.chol, &a).clamp(0.0, 1.0)
    }

    pub fn marginal_cdf(&self, j: usize, k: f64) -> f64 {
        if k <= 0.0 {
            return 0.0;
        }
        norm_cdf(self.z(j, k))
    }

    pub fn marginal_survival(&self, j: usize, k: f64) -> f64 {
        if k <= 0.0 {
            return 1.0;
        }
        norm_cdf(-self.z(j, k))
    }

    /// `E[(X_j - k)^+]`, the zero-rate Black call price.
    pub fn marginal_call(&self, j: usize, k: f64) -> f64 {
        let spot = self.spot[j];
        if k <= 0.0 {
            return spot - k;
        }
        let s = self.total_sd(j);
        let z = self.z(j, k);
        spot * norm_cdf(s - z) - k * norm_cdf(-z)
    }

    pub fn marginal_mean(&self, j: usize) -> f64 {
        self.spot[j]
    }

    pub fn marginal_quantile(&self, j: usize, q: f64) -> f64 {
        let s = self.total_sd(j);
        self.spot[j] * (s * norm_quantile(q) - 0.5 * s * s).exp()
    }

    pub(crate) fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.dimension();
        let mut stack = [0.0; 8];
        let mut heap = Vec::new();
        let w: &mut [f64] = if n <= stack.len() {
            &mut stack[..n]
        } else {
            heap.resize(n, 0.0);
            &mut heap
        };
        for wi in w.iter_mut() {
            *wi = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let mut z = 0.0;
            for j in 0..=i {
                z += self.chol[i][j] * w[j];
            }
            let s = self.total_sd(i);
            out[i] = self.spot[i] * (s * z - 0.5 * s * s).exp();
        }
    }
}
