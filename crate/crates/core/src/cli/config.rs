//! The experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::fdiff::{DiffSpec, Extrapolation, LimitSpec, DEFAULT_RELATIVE_STEP};
use crate::models::{load_law, SeedDescriptor, TerminalLaw};
use crate::payoffs::PNorm;
use crate::pricers::{MethodSelector, PricerConfig};
use crate::recovery::{default_limit_spec, FormulaTag, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Law file, relative to the config file.
    pub law: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `pricer.seed` when present.
    #[serde(default)]
    pub seed: Option<SeedDescriptor>,
    #[serde(default)]
    pub pricer: PricerConfig,
    #[serde(default)]
    pub diff: DiffBlock,
    #[serde(default)]
    pub limit: Option<LimitBlock>,
    #[serde(default)]
    pub grid: Option<GridBlock>,
    #[serde(default)]
    pub formulas: Vec<FormulaTag>,
    #[serde(default = "default_p_values")]
    pub p_values: Vec<PNorm>,
    #[serde(default)]
    pub price: Option<PriceBlock>,
    #[serde(default)]
    pub validate: ValidateBlock,
}

fn default_p_values() -> Vec<PNorm> {
    vec![PNorm::Finite(1.0), PNorm::Finite(2.0), PNorm::Infinity]
}

/// Stencil widths, either absolute or relative to the marginal means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffBlock {
    pub relative_step: f64,
    pub base_step: Option<Vec<f64>>,
    pub richardson_levels: usize,
}

impl Default for DiffBlock {
    fn default() -> Self {
        Self { relative_step: DEFAULT_RELATIVE_STEP, base_step: None, richardson_levels: 1 }
    }
}

/// Shrink sequence for `K -> 0+`: explicit, or geometric from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitBlock {
    pub shrink_sequence: Option<Vec<f64>>,
    /// Defaults to a tenth of the average marginal mean.
    pub start: Option<f64>,
    pub ratio: f64,
    pub terms: usize,
    pub extrapolation: Extrapolation,
}

impl Default for LimitBlock {
    fn default() -> Self {
        Self { shrink_sequence: None, start: None, ratio: 0.5, terms: 6, extrapolation: Extrapolation::LinearInK }
    }
}

/// Either explicit `axes`, or `lower`/`upper`/`counts` for a uniform lattice.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBlock {
    pub axes: Option<Vec<Vec<f64>>>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub counts: Option<Vec<usize>>,
}

/// Strike table for `price`: explicit `rows` of `(K_1, .., K_n, K)`, or the
/// tensor product of `component_axes` and `outer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceBlock {
    #[serde(default)]
    pub rows: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub component_axes: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_outer")]
    pub outer: Vec<f64>,
    #[serde(default = "default_price_p")]
    pub p: Vec<PNorm>,
    /// Defaults to `pricer.method`.
    #[serde(default)]
    pub methods: Option<Vec<MethodSelector>>,
}

fn default_outer() -> Vec<f64> {
    vec![0.0]
}

fn default_price_p() -> Vec<PNorm> {
    vec![PNorm::ONE]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateBlock {
    pub payoff_triples: usize,
    pub ladder_rungs: usize,
    pub sum_vectors: usize,
    pub tolerances: Tolerances,
}

impl Default for ValidateBlock {
    fn default() -> Self {
        Self { payoff_triples: 20, ladder_rungs: 9, sum_vectors: 5, tolerances: Tolerances::default() }
    }
}

/// Pass thresholds of the validation checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub density_main_linf: f64,
    pub density_main_l1: f64,
    pub density_cp_linf: f64,
    pub density_cdf_linf: f64,
    pub routes_vs_cdf_linf: f64,
    pub survival_rung: f64,
    pub joint_survival_identity: f64,
    pub breeden_litzenberger: f64,
    /// Slack on analytic inequalities for floating-point rounding.
    pub rounding: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            density_main_linf: 1e-2,
            density_main_l1: 5e-3,
            density_cp_linf: 2e-2,
            density_cdf_linf: 1e-3,
            routes_vs_cdf_linf: 2e-2,
            survival_rung: 2e-3,
            joint_survival_identity: 3e-3,
            breeden_litzenberger: 2e-3,
            rounding: 1e-12,
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config { field: field.to_string(), message: message.into() }
}

/// Parses a config document; errors name the offending field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "config".to_string() } else { path };
        config_error(&field, e.into_inner().to_string())
    })
}

/// A parsed config with its law loaded and command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub law: TerminalLaw,
    pub pricer: PricerConfig,
    pub digest: String,
}

impl Experiment {
    pub fn load(path: &Path, seed: Option<&str>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("config", format!("cannot read {}: {e}", path.display())))?;
        let mut config = parse_config(&text)?;
        if let Some(s) = seed {
            config.seed = Some(SeedDescriptor::new(s));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let law_path = base.join(&config.law);
        let law_text = std::fs::read_to_string(&law_path)
            .map_err(|e| config_error("law", format!("cannot read {}: {e}", law_path.display())))?;
        let law = load_law(&law_path).map_err(|e| config_error("law", e.to_string()))?;
        let mut pricer = config.pricer.clone();
        if let Some(s) = &config.seed {
            pricer.seed = s.clone();
        }
        pricer.validate().map_err(|e| config_error("pricer", e.to_string()))?;
        let digest = digest(&config, &law_text);
        let exp = Self { config, law, pricer, digest };
        exp.check()?;
        Ok(exp)
    }

    pub fn dimension(&self) -> usize {
        self.law.dimension()
    }

    fn check(&self) -> Result<(), CliError> {
        let n = self.dimension();
        let d = &self.config.diff;
        if let Some(steps) = &d.base_step {
            if steps.len() != n || steps.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
                return Err(config_error("diff.base_step", format!("needs {n} positive finite steps")));
            }
        } else if !(d.relative_step.is_finite() && d.relative_step > 0.0) {
            return Err(config_error("diff.relative_step", "must be positive and finite"));
        }
        if self.config.grid.is_some() {
            self.grid()?;
        }
        if self.config.limit.is_some() {
            self.limit_spec()?;
        }
        if self.config.p_values.is_empty() {
            return Err(config_error("p_values", "needs at least one exponent"));
        }
        Ok(())
    }

    pub fn diff_spec(&self) -> DiffSpec {
        let n = self.dimension();
        let d = &self.config.diff;
        let steps = match &d.base_step {
            Some(s) => s.clone(),
            None => (0..n)
                .map(|j| {
                    let m = self.law.marginal_mean(j);
                    d.relative_step * if m > 0.0 { m } else { 1.0 }
                })
                .collect(),
        };
        DiffSpec::central(vec![1; n], steps).with_levels(d.richardson_levels)
    }

    pub fn limit_spec(&self) -> Result<LimitSpec, CliError> {
        let Some(block) = &self.config.limit else {
            return Ok(default_limit_spec(&self.law));
        };
        let built = match &block.shrink_sequence {
            Some(seq) => LimitSpec::new(seq.clone(), block.extrapolation),
            None => {
                let start = block.start.unwrap_or_else(|| default_limit_spec(&self.law).shrink_sequence()[0]);
                LimitSpec::geometric(start, block.ratio, block.terms, block.extrapolation)
            }
        };
        built.map_err(|e| config_error("limit", e.to_string()))
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        let block = self.config.grid.as_ref().ok_or_else(|| config_error("grid", "a grid block is required"))?;
        let grid = match (&block.axes, &block.lower, &block.upper, &block.counts) {
            (Some(axes), None, None, None) => GridSpec::new(axes.clone()),
            (None, Some(lo), Some(hi), Some(c)) => GridSpec::uniform(lo, hi, c),
            _ => return Err(config_error("grid", "give either `axes` or all of `lower`, `upper`, `counts`")),
        }
        .map_err(|e| config_error("grid", e.to_string()))?;
        if grid.dimension() != self.dimension() {
            return Err(config_error(
                "grid",
                format!("grid has dimension {} but the law has dimension {}", grid.dimension(), self.dimension()),
            ));
        }
        Ok(grid)
    }

    pub fn output_dir(&self, flag: Option<&Path>, env: Option<PathBuf>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or(env)
            .or_else(|| self.config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// SHA-256 over the effective config and the law file text. The output
/// directory is excluded so relocated runs stay byte-identical.
fn digest(config: &ExperimentConfig, law_text: &str) -> String {
    let mut canonical = config.clone();
    canonical.output_dir = None;
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&canonical).expect("config serializes"));
    h.update([0u8]);
    h.update(law_text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
