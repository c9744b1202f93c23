//! JSON law specification files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CorrelatedLognormal, GridDensity, ModelError, TerminalLaw, DEFAULT_MASS_TOLERANCE};

#[derive(Debug, Error)]
pub enum LawFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed law JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed grid CSV {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("law file declares dimension {declared} but parameters describe {actual}")]
    Dimension { declared: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// On-disk form: `{"dimension": n, "kind": "...", "parameters": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawFile {
    pub dimension: usize,
    #[serde(flatten)]
    pub law: LawParameters,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "kebab-case")]
pub enum LawParameters {
    CorrelatedLognormal(LognormalParameters),
    LognormalMixture { components: Vec<MixtureComponent> },
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    GridDensity {
        /// CSV of `(x_1, .., x_n, value)` rows with a header line, relative to the law file.
        csv: PathBuf,
        #[serde(default = "default_mass_tolerance")]
        mass_tolerance: f64,
    },
    PointMass { atom: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LognormalParameters {
    pub spot: Vec<f64>,
    pub vol: Vec<f64>,
    /// Identity when omitted.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    pub maturity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    #[serde(flatten)]
    pub law: LognormalParameters,
}

fn default_mass_tolerance() -> f64 {
    DEFAULT_MASS_TOLERANCE
}

impl LognormalParameters {
    fn build(&self) -> Result<CorrelatedLognormal, ModelError> {
        match &self.correlation {
            Some(c) => CorrelatedLognormal::new(self.spot.clone(), self.vol.clone(), c.clone(), self.maturity),
            None => CorrelatedLognormal::independent(self.spot.clone(), self.vol.clone(), self.maturity),
        }
    }
}

impl LawFile {
    /// Builds the law; relative grid CSV paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<TerminalLaw, LawFileError> {
        let law = match &self.law {
            LawParameters::CorrelatedLognormal(p) => TerminalLaw::CorrelatedLognormal(p.build()?),
            LawParameters::LognormalMixture { components } => TerminalLaw::mixture(
                components
                    .iter()
                    .map(|c| c.law.build().map(|l| (c.weight, l)))
                    .collect::<Result<_, _>>()?,
            )?,
            LawParameters::UniformBox { lower, upper } => TerminalLaw::uniform_box(lower.clone(), upper.clone())?,
            LawParameters::GridDensity { csv, mass_tolerance } => {
                let path = base_dir.join(csv);
                let rows = read_grid_csv(&path)?;
                TerminalLaw::GridDensity(GridDensity::from_rows(&rows, *mass_tolerance)?)
            }
            LawParameters::PointMass { atom } => TerminalLaw::point_mass(atom.clone())?,
        };
        if law.dimension() != self.dimension {
            return Err(LawFileError::Dimension {
                declared: self.dimension,
                actual: law.dimension(),
            });
        }
        Ok(law)
    }
}

fn read_grid_csv(path: &Path) -> Result<Vec<Vec<f64>>, LawFileError> {
    let wrap = |source| LawFileError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(wrap)?;
    let mut rows = Vec::new();
    for record in reader.deserialize::<Vec<f64>>() {
        rows.push(record.map_err(wrap)?);
    }
    Ok(rows)
}

pub fn law_from_json(text: &str, base_dir: &Path) -> Result<TerminalLaw, LawFileError> {
    let file: LawFile = serde_json::from_str(text)?;
    file.build(base_dir)
}

pub fn load_law(path: &Path) -> Result<TerminalLaw, LawFileError> {
    let text = std::fs::read_to_string(path).map_err(|source| LawFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    law_from_json(&text, base)
}
