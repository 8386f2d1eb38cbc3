//! Training configuration: TOML-backed, with per-variant presets.

use crate::model::align_fuse::{FusionSpec, FusionStrategy};
use crate::model::cam::ModelVariant;
use crate::model::decoder::DecoderConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Model scale: toy | nano | tiny | base.
    pub variant: String,
    pub seed: u64,
    /// Joint-loss weight on the segmentation term.
    pub lambda: f64,
    pub fusion: FusionSection,
    pub optim: OptimSection,
    pub log: LogSection,
    pub augment: AugmentSection,
    /// Recorded in checkpoints for provenance; synthesis itself takes the
    /// font on the `synth` command line.
    pub font: Option<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub strategy: String,
    /// Offset groups G.
    pub groups: usize,
    /// Reference-grid downsampling factor.
    pub r: usize,
    pub offset_range: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    /// Metrics-CSV cadence in steps.
    pub every: usize,
    /// Checkpoint cadence in steps (0 = final only).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub enabled: bool,
    pub perspective: bool,
    pub affine: bool,
    pub rotation: bool,
    pub blur: bool,
    pub noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: "toy".into(),
            seed: 0,
            lambda: 1.0,
            fusion: FusionSection::default(),
            optim: OptimSection::default(),
            log: LogSection::default(),
            augment: AugmentSection::default(),
            font: None,
        }
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { strategy: "aligned".into(), groups: 4, r: 1, offset_range: 1.0 }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            batch_size: 16,
            base_lr: 4e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            warmup_epochs: 1,
            total_epochs: 125,
            grad_clip: 5.0,
        }
    }
}

impl Default for LogSection {
    fn default() -> Self {
        LogSection { every: 10, checkpoint_every: 0 }
    }
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            enabled: false,
            perspective: true,
            affine: true,
            rotation: true,
            blur: true,
            noise: true,
        }
    }
}

impl TrainConfig {
    /// CPU-scale preset used by the verification suite.
    pub fn toy() -> Self {
        TrainConfig::default()
    }

    pub fn preset(variant: ModelVariant) -> Self {
        let mut c = TrainConfig { variant: variant.name().into(), ..TrainConfig::default() };
        match variant {
            ModelVariant::Toy => {}
            ModelVariant::Nano => {
                c.optim.batch_size = 128;
                c.optim.base_lr = 8e-4;
                c.optim.total_epochs = 10;
            }
            ModelVariant::Tiny => {
                c.optim.batch_size = 128;
                c.optim.base_lr = 4e-4;
                c.optim.total_epochs = 10;
            }
            ModelVariant::Base => {
                c.optim.batch_size = 64;
                c.optim.base_lr = 2e-4;
                c.optim.total_epochs = 10;
            }
        }
        c
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: TrainConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn variant(&self) -> Result<ModelVariant, ConfigError> {
        self.variant.parse().map_err(ConfigError::Invalid)
    }

    pub fn fusion_spec(&self) -> Result<FusionSpec, ConfigError> {
        let strategy: FusionStrategy =
            self.fusion.strategy.parse().map_err(|e| ConfigError::Invalid(format!("{e}")))?;
        Ok(FusionSpec {
            strategy,
            groups: self.fusion.groups,
            offset_range: self.fusion.offset_range,
            r: self.fusion.r,
        })
    }

    pub fn decoder_config(&self) -> Result<DecoderConfig, ConfigError> {
        Ok(DecoderConfig { dim: self.variant()?.decoder_dim(), ..DecoderConfig::full() })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.variant()?;
        self.fusion_spec()?;
        let o = &self.optim;
        let positive = [
            ("batch_size", o.batch_size as f64),
            ("base_lr", o.base_lr),
            ("beta1", o.beta1),
            ("beta2", o.beta2),
            ("total_epochs", o.total_epochs as f64),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if o.weight_decay < 0.0 || o.grad_clip <= 0.0 {
            return Err(ConfigError::Invalid("weight_decay ≥ 0 and grad_clip > 0 required".into()));
        }
        if o.beta1 >= 1.0 || o.beta2 >= 1.0 {
            return Err(ConfigError::Invalid("betas must lie in (0,1)".into()));
        }
        if o.warmup_epochs >= o.total_epochs {
            return Err(ConfigError::Invalid(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                o.warmup_epochs, o.total_epochs
            )));
        }
        if self.lambda < 0.0 {
            return Err(ConfigError::Invalid("lambda must be non-negative".into()));
        }
        if self.fusion.groups == 0 || self.fusion.r == 0 {
            return Err(ConfigError::Invalid("fusion.groups and fusion.r must be ≥ 1".into()));
        }
        if self.log.every == 0 {
            return Err(ConfigError::Invalid("log.every must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_toy_preset_and_validate() {
        let c = TrainConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.variant().unwrap(), ModelVariant::Toy);
        assert_eq!(c.optim.batch_size, 16);
        assert_eq!(c.optim.base_lr, 4e-4);
        assert_eq!(c.optim.weight_decay, 0.05);
        assert_eq!(c.lambda, 1.0);
        assert_eq!(c.fusion_spec().unwrap(), FusionSpec::default());
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let mut c = TrainConfig::preset(ModelVariant::Nano);
        c.seed = 41;
        c.augment.enabled = true;
        c.augment.blur = false;
        c.font = Some("assets/DejaVuSans.ttf".into());
        let text = c.to_toml();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = TrainConfig::from_toml("variant = \"tiny\"\n[optim]\nbatch_size = 4\n").unwrap();
        assert_eq!(c.variant().unwrap(), ModelVariant::Tiny);
        assert_eq!(c.optim.batch_size, 4);
        assert_eq!(c.optim.beta2, 0.999);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(TrainConfig::from_toml("variant = \"huge\"").is_err());
        assert!(TrainConfig::from_toml("[fusion]\nstrategy = \"mean\"").is_err());
        assert!(TrainConfig::from_toml("[optim]\nbase_lr = 0.0").is_err());
        assert!(TrainConfig::from_toml("[optim]\nwarmup_epochs = 200").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
    }
}
