//! Engine settings, readable from TOML. Every field has a default, so a
//! config file only lists what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::active::ActiveSettings;
use crate::classifier::TrainConfig;
use crate::error::{Error, Result};
use crate::imaging::{AugmentationPolicy, CropConfig};
use crate::merge::MergeRule;
use crate::metrics::MetricKind;
use crate::tuning::{DEFAULT_ALPHAS, DEFAULT_FRACTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub train: TrainConfig,
    pub alphas: Vec<f64>,
    pub metric: MetricKind,
    /// Threshold used before any tuning has happened.
    pub default_alpha: f64,
    pub beta: f64,
    pub merge_rule: MergeRule,
    pub split_fractions: [f64; 3],
    pub stratify_by_station: bool,
    pub active: ActiveSettings,
    /// Augmented variants per training crop.
    pub augmentations: usize,
    pub crop: CropConfig,
    pub augmentation: AugmentationPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            alphas: DEFAULT_ALPHAS.to_vec(),
            metric: MetricKind::F1,
            default_alpha: 0.5,
            beta: 0.0,
            merge_rule: MergeRule::Aggregate,
            split_fractions: DEFAULT_FRACTIONS,
            stratify_by_station: true,
            active: ActiveSettings::default(),
            augmentations: 0,
            crop: CropConfig::default(),
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.crop.validate()?;
        for (name, v) in [("default_alpha", self.default_alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig(
                "alphas must be a non-empty list in [0,1]".into(),
            ));
        }
        if self.active.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "active.batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.active.val_fraction) {
            return Err(Error::InvalidConfig(
                "active.val_fraction must lie in [0,1)".into(),
            ));
        }
        if self.augmentations > self.augmentation.max_augmentations_per_crop {
            return Err(Error::InvalidConfig(format!(
                "augmentations = {} exceeds augmentation.max_augmentations_per_crop = {}",
                self.augmentations, self.augmentation.max_augmentations_per_crop
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
