//! Experiment configuration: one TOML file covering data, networks,
//! training and metrics. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::metrics::{SkvdConfig, SubsetProtocol};
use crate::scenegen::LayoutConfig;
use crate::trainer::{Condition, ModelConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Rendered dataset directory (manifest + samples).
    pub source: Option<PathBuf>,
    /// Real dataset directory.
    pub target: Option<PathBuf>,
    /// Label cache directory.
    pub labels: Option<PathBuf>,
    /// Embedding stores and match table.
    pub features: Option<PathBuf>,
    pub num_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: None, target: None, labels: None, features: None, num_samples: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Feature extractor for KID and sKVD, separate from the training one.
    pub backbone: BackboneConfig,
    pub kid: SubsetProtocol,
    pub skvd: SkvdConfig,
    /// 1-based tap numbers for the aligned metric.
    pub taps: Vec<usize>,
    pub density_grid: [usize; 2],
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), kid: SubsetProtocol::default(), skvd: SkvdConfig::default(), taps: vec![1, 2, 3, 4, 5], density_grid: [32, 32] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub condition: Condition,
    pub data: DataConfig,
    pub scenes: LayoutConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::toy(), ..Default::default() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.model.encoder.validate()?;
        self.model.enhancer.validate()?;
        self.model.discriminator.validate()?;
        self.train.validate()?;
        if self.metrics.taps.iter().any(|&t| t == 0 || t > self.metrics.backbone.widths.len()) {
            return Err(Error::Config(format!("metrics.taps {:?} outside 1..={}", self.metrics.taps, self.metrics.backbone.widths.len())));
        }
        Ok(())
    }

    /// A configured path that must already exist.
    pub fn existing(field: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        match path {
            None => Err(Error::Config(format!("{field} is not set"))),
            Some(p) if !p.exists() => Err(Error::Config(format!("{field} = {} does not exist", p.display()))),
            Some(p) => Ok(p.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::toy()] {
            assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
        let cfg = ExperimentConfig::parse("seed = 3\ncondition = \"Unif. sampl., crop 256\"\n[train]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.condition, Condition::UniformCrop(256));
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.gp_weight, 0.06);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("learning_rate")), "{err}");
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[metrics]\ntaps = [6]\n").is_err());
    }

    #[test]
    fn missing_paths() {
        assert!(matches!(ExperimentConfig::existing("data.source", &None), Err(Error::Config(_))));
        let nowhere = Some(PathBuf::from("/nonexistent/xyz"));
        assert!(matches!(ExperimentConfig::existing("data.source", &nowhere), Err(Error::Config(m)) if m.contains("data.source")));
    }
}
