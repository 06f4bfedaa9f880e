//! Run configuration: an optional TOML file overlaid by command-line flags.

use casecohort::analysis::RiskQuery;
use casecohort::calibration::{CalibrationControls, CovariateModel, ImputationSpec, ModelKind, Predictor};
use casecohort::coxfit::SolverControls;
use casecohort::dataset::Schema;
use casecohort::simharness::ScenarioConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config `{path}`: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

/// Estimation regime requested for `fit` and `calibrate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeChoice {
    Cohort,
    Design,
    Calibrated,
    ThreePhase,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub max_iterations: Option<usize>,
    pub max_halvings: Option<usize>,
    pub score_tolerance: Option<f64>,
    pub loglik_tolerance: Option<f64>,
    pub rake_iterations: Option<usize>,
    pub rake_tolerance: Option<f64>,
}

impl SolverOverrides {
    pub fn solver(&self) -> SolverControls {
        let d = SolverControls::default();
        SolverControls {
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            max_halvings: self.max_halvings.unwrap_or(d.max_halvings),
            score_tolerance: self.score_tolerance.unwrap_or(d.score_tolerance),
            loglik_tolerance: self.loglik_tolerance.unwrap_or(d.loglik_tolerance),
            ..d
        }
    }

    pub fn calibration(&self) -> CalibrationControls {
        let d = CalibrationControls::default();
        CalibrationControls {
            max_iterations: self.rake_iterations.unwrap_or(d.max_iterations),
            tolerance: self.rake_tolerance.unwrap_or(d.tolerance),
            ..d
        }
    }
}

/// Contents of the optional config file; every field may be overridden by a flag.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub regime: Option<RegimeChoice>,
    pub schema: Option<Schema>,
    pub subcohort_col: Option<String>,
    pub phase3_col: Option<String>,
    pub phase3_known_probs: Option<String>,
    #[serde(default)]
    pub risks: Vec<RiskQuery>,
    pub imputation: Option<ImputationSpec>,
    #[serde(default)]
    pub solver: SolverOverrides,
    pub level: Option<f64>,
    pub scenario: Option<ScenarioConfig>,
}

pub fn load_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Schema file: a TOML table with the column names.
pub fn load_schema(path: &Path) -> Result<Schema, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_numbers(text: &str, what: &str) -> Result<Vec<f64>, ConfigError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| ConfigError::Invalid(format!("{what}: `{s}` is not a number")))
        })
        .collect()
}

/// Least-squares model on every proxy and phase-one covariate, for each phase-two covariate.
pub fn default_imputation(schema: &Schema) -> ImputationSpec {
    let predictors: Vec<Predictor> = schema
        .proxies
        .iter()
        .chain(&schema.phase1)
        .map(|c| Predictor::Column(c.clone()))
        .collect();
    ImputationSpec {
        models: schema
            .phase2
            .iter()
            .map(|c| CovariateModel {
                covariate: c.clone(),
                kind: ModelKind::LeastSquares,
                predictors: predictors.clone(),
            })
            .collect(),
    }
}
