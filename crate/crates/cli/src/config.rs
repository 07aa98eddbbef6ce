use std::path::{Path, PathBuf};

use adcost_core::cost::ArpuFactors;
use adcost_core::planner::{FilterDimension, SampleSizeParams, SetupStrategy};
use adcost_core::sim::SimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Extra `domain,category` rows merged into the builtin blacklist.
    pub blacklist: Option<PathBuf>,
    /// `cidr,city` table.
    pub geo: Option<PathBuf>,
    /// `domain,iab_code` table.
    pub iab_map: Option<PathBuf>,
    /// Replaces the builtin notification rules.
    pub macro_rules: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: Option<usize>,
    pub features_per_split: Option<usize>,
    pub regression: Option<bool>,
    pub variance_filter: Option<bool>,
    /// Feature group letters, e.g. "ABE".
    pub groups: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub dimensions: Option<Vec<FilterDimension>>,
    pub strategy: Option<SetupStrategy>,
    pub sample_size: Option<SampleSizeParams>,
    pub max_bid_cpm: Option<f64>,
}

/// Analysis time window; bounds are RFC 3339 timestamps or epoch ms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub start: Option<String>,
    pub end: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: Option<String>,
    pub models_dir: Option<PathBuf>,
    pub contributions: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    /// Number of price classes.
    pub classes: Option<usize>,
    pub forest: ForestConfig,
    pub arpu: Option<ArpuFactors>,
    pub campaign: CampaignConfig,
    pub window: WindowConfig,
    /// Multiplier applied to cleartext prices.
    pub time_shift: Option<f64>,
    pub shift_encrypted: Option<bool>,
    pub sim: Option<SimConfig>,
    pub service: ServiceConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        for p in [&cfg.paths.blacklist, &cfg.paths.geo, &cfg.paths.iab_map, &cfg.paths.macro_rules, &cfg.paths.model]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(CliError::Config(format!("config references missing file {}", p.display())));
            }
        }
        if let Some(sim) = &cfg.sim {
            sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(f) = &cfg.arpu {
            f.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(cfg)
    }
}

/// Parses an RFC 3339 timestamp or integer epoch milliseconds.
pub fn parse_time(s: &str) -> Result<i64, CliError> {
    if let Ok(ms) = s.parse::<i64>() {
        return Ok(ms);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp_millis())
        .map_err(|e| CliError::Config(format!("bad time {s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"classes": 4, "colour": 1}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"forest": {"trees": 4}}"#).is_err());
        let c: Config = serde_json::from_str(r#"{"classes": 3, "forest": {"n_trees": 7}}"#).unwrap();
        assert_eq!((c.classes, c.forest.n_trees), (Some(3), Some(7)));
    }

    #[test]
    fn missing_referenced_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"paths": {"geo": "/nonexistent/geo.csv"}}"#).unwrap();
        assert!(matches!(Config::load(Some(&cfg)), Err(CliError::Config(_))));
    }

    #[test]
    fn times_parse_both_ways() {
        assert_eq!(parse_time("1451865600000").unwrap(), 1451865600000);
        assert_eq!(parse_time("2016-01-04T00:00:00Z").unwrap(), 1451865600000);
        assert!(parse_time("yesterday").is_err());
    }
}
