//! TOML run configuration covering every tunable of the pipeline.
//!
//! ```toml
//! [data]
//! n_ids = 50
//! per_id = 20
//!
//! [train]
//! virtual_ids = 20
//! iterations = 2000
//!
//! [surrogate]
//! partition = "virtual"
//! spread = 0.05
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leakage::{AuditOptions, DEFAULT_BINS, DEFAULT_VERDICT_QUANTILE};
use crate::surrogate::{Partition, Spread, SurrogateConfig};
use crate::trainer::TrainRunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_ids: usize,
    pub per_id: usize,
    pub dim: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_ids: 50, per_id: 20, dim: 64, jitter: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub partition: Partition,
    pub per_class: usize,
    pub spread: Spread,
    pub tightness: f64,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = SurrogateConfig::default();
        SimulateConfig { partition: Partition::Virtual, per_class: s.per_class, spread: s.spread, tightness: s.tightness, seed: s.seed }
    }
}

impl SimulateConfig {
    pub fn sampling(&self) -> SurrogateConfig {
        SurrogateConfig { per_class: self.per_class, spread: self.spread.clone(), tightness: self.tightness, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bins: usize,
    /// Cap on positive and negative pairs drawn per class; all pairs when absent.
    pub max_pairs_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { bins: DEFAULT_BINS, max_pairs_per_class: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub top_j: usize,
    pub block: usize,
    pub bins: usize,
    pub baseline: bool,
    /// Quantile of both top-1 distributions compared by the verdict.
    pub quantile: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        let o = AuditOptions::default();
        AuditConfig { top_j: o.top_j, block: o.block, bins: o.bins, baseline: o.baseline, quantile: DEFAULT_VERDICT_QUANTILE }
    }
}

impl AuditConfig {
    pub fn options(&self) -> AuditOptions {
        AuditOptions { top_j: self.top_j, block: self.block, bins: self.bins, baseline: self.baseline }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainRunConfig,
    pub surrogate: SimulateConfig,
    pub metrics: MetricsConfig,
    pub audit: AuditConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn populated_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_decay_at = vec![10, 20];
        cfg.train.ablation_no_virtual_noise = true;
        cfg.surrogate.partition = Partition::Both;
        cfg.surrogate.spread = Spread::PerDim(vec![0.1, 0.25, 1.0 / 3.0]);
        cfg.metrics.max_pairs_per_class = Some(1000);
        cfg.audit.quantile = 0.99;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::parse("[train]\niterations = 5\n\n[surrogate]\nspread = 0.2\npartition = \"real\"\n").unwrap();
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.train.virtual_ids, TrainRunConfig::default().virtual_ids);
        assert_eq!(cfg.surrogate.spread, Spread::Scalar(0.2));
        assert_eq!(cfg.surrogate.partition, Partition::Real);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("[surrogate]\nbogus = 1\n").is_err());
    }
}
