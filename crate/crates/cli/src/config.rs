//! TOML configuration shared by all commands.
//!
//! ```toml
//! ledger = "state/ledger.jsonl"
//! rib = "state/rib.txt"            # optional, enables asn filters
//!
//! [dataset]
//! format = "netflow-csv"           # or "tstat-log"
//! paths = ["data/week1"]
//!
//! [dataset.column_mapping]         # optional, names or 0-based indexes
//! client_id = "sa"
//!
//! [engine]
//! workers = 0                      # 0 = one per core
//! population_cache = "state/population.json"
//!
//! [operators]
//! analyst = 1.0
//!
//! [templates.weekly-volume]        # optional per-query defaults
//! bounds = [0.0, 1e9]
//! bins = { type = "logarithmic", lower = 1e2, upper = 1e11, count = 100 }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use flowdp_core::dp::BinSpec;
use flowdp_core::flow::DatasetDescriptor;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub population_cache: Option<PathBuf>,
}

/// Reusable defaults a query can pull in with `--template`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTemplate {
    #[serde(default)]
    pub bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub bins: Option<BinSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetDescriptor,
    pub ledger: PathBuf,
    #[serde(default)]
    pub rib: Option<PathBuf>,
    #[serde(default)]
    pub engine: EngineSection,
    /// operator id -> allocated epsilon
    pub operators: BTreeMap<String, f64>,
    #[serde(default)]
    pub templates: BTreeMap<String, QueryTemplate>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Config = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    /// Structural checks; referenced paths must exist up front so a
    /// typo fails the command instead of charging a budget later.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.operators.is_empty() {
            return Err(ConfigError::Invalid("no operators configured".into()));
        }
        for (operator, &eps) in &self.operators {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "operator {operator} has a non-positive allocation {eps}"
                )));
            }
        }
        if self.dataset.paths.is_empty() {
            return Err(ConfigError::Invalid("dataset.paths is empty".into()));
        }
        for path in &self.dataset.paths {
            if !path.exists() {
                return Err(ConfigError::Invalid(format!(
                    "dataset path {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(rib) = &self.rib {
            if !rib.exists() {
                return Err(ConfigError::Invalid(format!(
                    "rib path {} does not exist",
                    rib.display()
                )));
            }
        }
        if let Some(parent) = self.ledger.parent() {
            if !parent.as_os_str().is_empty() && !parent.exists() {
                return Err(ConfigError::Invalid(format!(
                    "ledger directory {} does not exist",
                    parent.display()
                )));
            }
        }
        for (name, template) in &self.templates {
            if let Some([lo, hi]) = template.bounds {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(ConfigError::Invalid(format!(
                        "template {name}: bounds must be finite and ordered"
                    )));
                }
            }
            if let Some(bins) = &template.bins {
                bins.edges()
                    .map_err(|e| ConfigError::Invalid(format!("template {name}: {e}")))?;
            }
        }
        Ok(())
    }
}
