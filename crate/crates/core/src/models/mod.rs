//! Analytic terminal laws of the asset vector `X_T` under the pricing measure.
//!
//! Each law exposes its density, joint CDF, marginals and a seeded sampler. The
//! same objects serve as pricing inputs and as ground-truth oracles for the
//! recovery routines.

mod file;
pub mod gaussian;
mod grid;
mod lognormal;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Estimate;

pub use file::{load_law, law_from_json, LawFile, LawFileError, LawParameters};
pub use grid::{GridDensity, DEFAULT_MASS_TOLERANCE};
pub use lognormal::CorrelatedLognormal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("law is not absolutely continuous with respect to Lebesgue measure")]
    NotAbsolutelyContinuous,
    #[error("dimension mismatch: law has {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid law parameter: {0}")]
    InvalidParameter(String),
}

impl ModelError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }
}

/// Deterministic random stream identifier. The same descriptor always yields the
/// same draws, independent of thread scheduling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedDescriptor(pub String);

impl SeedDescriptor {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// ChaCha20 generator keyed by SHA-256 of the descriptor and a stream label.
    pub fn rng(&self, stream: &str) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.0.as_bytes());
        hasher.update([0u8]);
        hasher.update(stream.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(seed)
    }
}

impl Default for SeedDescriptor {
    fn default() -> Self {
        Self::new("default")
    }
}

/// Draws of `X_T`, one row per realisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    dimension: usize,
    points: Vec<f64>,
    seed: SeedDescriptor,
}

impl Sample {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dimension
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn seed(&self) -> &SeedDescriptor {
        &self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dimension..(i + 1) * self.dimension]
    }

    /// Row-major coordinates, `len() * dimension()` values.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dimension)
    }
}

#[derive(Debug, Clone)]
pub struct UniformBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    inv_volume: f64,
}

impl UniformBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(ModelError::invalid("uniform box bounds must have equal positive length"));
        }
        for (a, b) in lower.iter().zip(&upper) {
            if !(a.is_finite() && b.is_finite() && *a >= 0.0 && a < b) {
                return Err(ModelError::invalid("uniform box needs 0 <= a < b componentwise"));
            }
        }
        let volume: f64 = lower.iter().zip(&upper).map(|(a, b)| b - a).product();
        Ok(Self { lower, upper, inv_volume: 1.0 / volume })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn fraction_below(&self, j: usize, k: f64) -> f64 {
        ((k - self.lower[j]) / (self.upper[j] - self.lower[j])).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct LognormalMixture {
    components: Vec<(f64, CorrelatedLognormal)>,
}

impl LognormalMixture {
    pub fn new(components: Vec<(f64, CorrelatedLognormal)>) -> Result<Self, ModelError> {
        let first = components
            .first()
            .ok_or_else(|| ModelError::invalid("mixture needs at least one component"))?;
        let n = first.1.dimension();
        if components.iter().any(|(_, c)| c.dimension() != n) {
            return Err(ModelError::invalid("mixture components differ in dimension"));
        }
        if components.iter().any(|(w, _)| !(w.is_finite() && *w > 0.0)) {
            return Err(ModelError::invalid("mixture weights must be positive"));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ModelError::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f64, CorrelatedLognormal)] {
        &self.components
    }

    fn weighted<F: Fn(&CorrelatedLognormal) -> f64>(&self, f: F) -> f64 {
        self.components.iter().map(|(w, c)| w * f(c)).sum()
    }
}

/// The pricing measure `Q` of `X_T` on `R_+^n`.
#[derive(Debug, Clone)]
pub enum TerminalLaw {
    CorrelatedLognormal(CorrelatedLognormal),
    LognormalMixture(LognormalMixture),
    UniformBox(UniformBox),
    GridDensity(GridDensity),
    PointMass(Vec<f64>),
}

/// Sample size and stream label for Monte Carlo joint CDFs above three dimensions.
const CDF_MC_SAMPLES: usize = 1 << 18;
const CDF_MC_STREAM: &str = "joint-cdf";

impl TerminalLaw {
    pub fn independent_lognormal(spot: Vec<f64>, vol: Vec<f64>, maturity: f64) -> Result<Self, ModelError> {
        CorrelatedLognormal::independent(spot, vol, maturity).map(Self::CorrelatedLognormal)
    }

    pub fn uniform_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        UniformBox::new(lower, upper).map(Self::UniformBox)
    }

    pub fn point_mass(atom: Vec<f64>) -> Result<Self, ModelError> {
        if atom.is_empty() || atom.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ModelError::invalid("point mass atom must lie in R_+^n"));
        }
        Ok(Self::PointMass(atom))
    }

    pub fn mixture(components: Vec<(f64, CorrelatedLognormal)>) -> Result<Self, ModelError> {
        LognormalMixture::new(components).map(Self::LognormalMixture)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::CorrelatedLognormal(_) => "correlated-lognormal",
            Self::LognormalMixture(_) => "lognormal-mixture",
            Self::UniformBox(_) => "uniform-box",
            Self::GridDensity(_) => "grid-density",
            Self::PointMass(_) => "point-mass",
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::CorrelatedLognormal(l) => l.dimension(),
            Self::LognormalMixture(m) => m.components[0].1.dimension(),
            Self::UniformBox(b) => b.lower.len(),
            Self::GridDensity(g) => g.dimension(),
            Self::PointMass(a) => a.len(),
        }
    }

    pub fn absolutely_continuous(&self) -> bool {
        !matches!(self, Self::PointMass(_))
    }

    /// True when the joint CDF is the product of the marginal CDFs.
    pub fn has_independent_components(&self) -> bool {
        match self {
            Self::CorrelatedLognormal(l) => l
                .correlation()
                .iter()
                .enumerate()
                .all(|(i, r)| r.iter().enumerate().all(|(j, v)| i == j || *v == 0.0)),
            Self::UniformBox(_) | Self::PointMass(_) => true,
            Self::LognormalMixture(m) => m.components.len() == 1
                && TerminalLaw::CorrelatedLognormal(m.components[0].1.clone())
                    .has_independent_components(),
            Self::GridDensity(_) => false,
        }
    }

    pub(crate) fn check_dimension(&self, got: usize) -> Result<(), ModelError> {
        let expected = self.dimension();
        if expected != got {
            return Err(ModelError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// Radon–Nikodym derivative `dQ/dm` at `x`.
    pub fn density(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dimension(x.len())?;
        Ok(match self {
            Self::PointMass(_) => return Err(ModelError::NotAbsolutelyContinuous),
            _ => self.density_unchecked(x),
        })
    }

    /// Density without argument validation; zero for the point mass.
    pub(crate) fn density_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Self::CorrelatedLognormal(l) => l.density(x),
            Self::LognormalMixture(m) => m.weighted(|c| c.density(x)),
            Self::UniformBox(b) => {
                let inside = x
                    .iter()
                    .zip(b.lower.iter().zip(&b.upper))
                    .all(|(v, (a, c))| v >= a && v <= c);
                if inside {
                    b.inv_volume
                } else {
                    0.0
                }
            }
            Self::GridDensity(g) => g.density(x),
            Self::PointMass(_) => 0.0,
        }
    }

    /// `Q(X_i <= k_i for all i)`. Deterministic for `n <= 3`; Monte Carlo with a
    /// three-sigma error otherwise.
    pub fn joint_cdf(&self, k: &[f64]) -> Result<Estimate, ModelError> {
        self.check_dimension(k.len())?;
        let value = match self {
            Self::CorrelatedLognormal(l) if l.dimension() <= 3 => l.joint_cdf(k),
            Self::LognormalMixture(m) if m.components[0].1.dimension() <= 3 => {
                m.weighted(|c| c.joint_cdf(k))
            }
            Self::CorrelatedLognormal(_) | Self::LognormalMixture(_) => {
                return Ok(self.monte_carlo_cdf(k));
            }
            Self::UniformBox(b) => (0..k.len()).map(|j| b.fraction_below(j, k[j])).product(),
            Self::GridDensity(g) => g.joint_cdf(k),
            Self::PointMass(a) => {
                if a.iter().zip(k).all(|(x, kk)| x <= kk) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Ok(Estimate::exact(value))
    }

    fn monte_carlo_cdf(&self, k: &[f64]) -> Estimate {
        let sample = self.sample_stream(CDF_MC_SAMPLES, &SeedDescriptor::new("models"), CDF_MC_STREAM);
        let hits = sample
            .rows()
            .filter(|x| x.iter().zip(k).all(|(a, b)| a <= b))
            .count();
        let p = hits as f64 / sample.len() as f64;
        let se = (p * (1.0 - p) / sample.len() as f64).sqrt();
        Estimate::new(p, 3.0 * se)
    }

    pub fn marginal_cdf(&self, j: usize, k: f64) -> f64 {
        match self {
            Self::CorrelatedLognormal(l) => l.marginal_cdf(j, k),
            Self::LognormalMixture(m) => m.weighted(|c| c.marginal_cdf(j, k)),
            Self::UniformBox(b) => b.fraction_below(j, k),
            Self::GridDensity(g) => g.marginal_cdf(j, k),
            Self::PointMass(a) => f64::from(u8::from(a[j] <= k)),
        }
    }

    /// `Q(X_j >= k)`.
    pub fn marginal_survival_analytic(&self, j: usize, k: f64) -> Result<f64, ModelError> {
        if j >= self.dimension() {
            return Err(ModelError::invalid(format!("coordinate {j} out of range")));
        }
        if k <= 0.0 {
            return Ok(1.0);
        }
        Ok(match self {
            Self::CorrelatedLognormal(l) => l.marginal_survival(j, k),
            Self::LognormalMixture(m) => m.weighted(|c| c.marginal_survival(j, k)),
            Self::UniformBox(b) => 1.0 - b.fraction_below(j, k),
            Self::GridDensity(g) => g.marginal_survival(j, k),
            Self::PointMass(a) => f64::from(u8::from(a[j] >= k)),
        })
    }

    /// `E[(X_j - k)^+]`.
    pub fn marginal_call(&self, j: usize, k: f64) -> f64 {
        match self {
            Self::CorrelatedLognormal(l) => l.marginal_call(j, k),
            Self::LognormalMixture(m) => m.weighted(|c| c.marginal_call(j, k)),
            Self::UniformBox(b) => {
                let (a, c) = (b.lower[j], b.upper[j]);
                if k <= a {
                    0.5 * (a + c) - k
                } else if k >= c {
                    0.0
                } else {
                    (c - k) * (c - k) / (2.0 * (c - a))
                }
            }
            Self::GridDensity(g) => g.marginal_call(j, k),
            Self::PointMass(a) => (a[j] - k).max(0.0),
        }
    }

    pub fn marginal_mean(&self, j: usize) -> f64 {
        match self {
            Self::CorrelatedLognormal(l) => l.marginal_mean(j),
            Self::LognormalMixture(m) => m.weighted(|c| c.marginal_mean(j)),
            Self::UniformBox(b) => 0.5 * (b.lower[j] + b.upper[j]),
            Self::GridDensity(g) => g.marginal_mean(j),
            Self::PointMass(a) => a[j],
        }
    }

    /// Smallest `x` with `Q(X_j <= x) >= q`.
    pub fn marginal_quantile(&self, j: usize, q: f64) -> f64 {
        match self {
            Self::CorrelatedLognormal(l) => l.marginal_quantile(j, q),
            Self::LognormalMixture(m) => {
                let (mut a, mut b) = m.components.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), (_, c)| {
                    let x = c.marginal_quantile(j, q);
                    (lo.min(x), hi.max(x))
                });
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if self.marginal_cdf(j, mid) < q {
                        a = mid;
                    } else {
                        b = mid;
                    }
                    if b - a <= 1e-15 * b {
                        break;
                    }
                }
                0.5 * (a + b)
            }
            Self::UniformBox(b) => b.lower[j] + q * (b.upper[j] - b.lower[j]),
            Self::GridDensity(g) => g.marginal_quantile(j, q),
            Self::PointMass(a) => a[j],
        }
    }

    /// Per-coordinate box holding all but `tail` marginal mass on each side.
    /// Bounded supports are returned exactly.
    pub fn truncation_box(&self, tail: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.dimension();
        match self {
            Self::UniformBox(b) => (b.lower.clone(), b.upper.clone()),
            Self::GridDensity(g) => ((0..n).map(|j| g.lower(j)).collect(), (0..n).map(|j| g.upper(j)).collect()),
            Self::PointMass(a) => (a.clone(), a.clone()),
            _ => (
                (0..n).map(|j| self.marginal_quantile(j, tail).max(0.0)).collect(),
                (0..n).map(|j| self.marginal_quantile(j, 1.0 - tail)).collect(),
            ),
        }
    }

    /// Points along coordinate `j` where the density is not smooth.
    pub fn density_breakpoints(&self, j: usize) -> &[f64] {
        match self {
            Self::GridDensity(g) => &g.axes()[j],
            _ => &[],
        }
    }

    pub fn sample(&self, count: usize, seed: &SeedDescriptor) -> Sample {
        self.sample_stream(count, seed, "sample")
    }

    fn sample_stream(&self, count: usize, seed: &SeedDescriptor, stream: &str) -> Sample {
        let n = self.dimension();
        let mut rng = seed.rng(stream);
        let mut points = vec![0.0; count * n];
        for row in points.chunks_exact_mut(n) {
            self.draw(&mut rng, row);
        }
        Sample { dimension: n, points, seed: seed.clone() }
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Self::CorrelatedLognormal(l) => l.sample_into(rng, out),
            Self::LognormalMixture(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let last = m.components.len() - 1;
                for (i, (w, c)) in m.components.iter().enumerate() {
                    acc += w;
                    if u < acc || i == last {
                        c.sample_into(rng, out);
                        break;
                    }
                }
            }
            Self::UniformBox(b) => {
                for j in 0..out.len() {
                    out[j] = b.lower[j] + (b.upper[j] - b.lower[j]) * rng.random::<f64>();
                }
            }
            Self::GridDensity(g) => g.sample_into(rng, out),
            Self::PointMass(a) => out.copy_from_slice(a),
        }
    }
}
