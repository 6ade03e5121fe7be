//! Run configuration: model dimensions, loss weights, thresholds, training
//! schedule. Serialized as JSON next to every run's outputs.

use crate::objective::LossWeights;
use crate::psdql::InjectionConfig;
use crate::scc::DEFAULT_LAMBDA_ANGLE;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Model width.
    pub d: usize,
    /// Toy text-encoder output width (projected to `d` on entry).
    pub text_dim: usize,
    /// Visual grid channels.
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Detection query count (full-scale reference value is 300).
    pub n_queries: usize,
    /// Decoder depth; must be even for the two-phase schedule.
    pub decoder_layers: usize,
    /// Context-encoder depth after fusion.
    pub bif_layers: usize,
    /// Token hash bucket count for the toy text embedder.
    pub vocab_hash: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 32,
            text_dim: 32,
            channels: 16,
            grid_h: 8,
            grid_w: 8,
            n_queries: 20,
            decoder_layers: 4,
            bif_layers: 2,
            vocab_hash: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Stage-1 confidence cut.
    pub confidence: f64,
    /// Stage-2 referring cut.
    pub beta_ref: f64,
    /// Consecutive misses before a track terminates.
    pub miss_limit: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            confidence: 0.7,
            beta_ref: 0.5,
            miss_limit: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Core learning rate; the input-projection tier trains slower.
    pub lr_core: f64,
    pub lr_embed: f64,
    /// Fraction of epochs after which the rate decays by 0.1.
    pub decay_at: f64,
    pub optimizer: OptimizerKind,
    /// Expressions sampled per scene per epoch (0 = all).
    pub exprs_per_scene: usize,
    /// Epoch at which track-query propagation starts; earlier epochs train
    /// detection only so carried features are meaningful when they appear.
    pub track_start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr_core: 1e-3,
            lr_embed: 1e-4,
            decay_at: 0.5,
            optimizer: OptimizerKind::Adam,
            exprs_per_scene: 4,
            track_start_epoch: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub weights: LossWeights,
    pub thresholds: Thresholds,
    pub lambda_angle: LambdaAngle,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
    pub seed: Seed,
}

/// Newtype so serde defaults can carry the paper value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaAngle(pub f64);

impl Default for LambdaAngle {
    fn default() -> Self {
        LambdaAngle(DEFAULT_LAMBDA_ANGLE)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl Default for Seed {
    fn default() -> Self {
        Seed(42)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dims;
        if d.d < 4 || d.text_dim < 4 {
            return Err(ConfigError::Invalid("model dims must be >= 4".into()));
        }
        if d.decoder_layers < 2 || d.decoder_layers % 2 != 0 {
            return Err(ConfigError::Invalid(
                "decoder_layers must be even and >= 2".into(),
            ));
        }
        if d.bif_layers == 0 {
            return Err(ConfigError::Invalid("bif_layers must be >= 1".into()));
        }
        if d.grid_h == 0 || d.grid_w == 0 || d.n_queries == 0 {
            return Err(ConfigError::Invalid("grid and query counts must be positive".into()));
        }
        if d.channels < crate::encode::ATTRIBUTE_CHANNELS {
            return Err(ConfigError::Invalid(format!(
                "channels must be >= {}",
                crate::encode::ATTRIBUTE_CHANNELS
            )));
        }
        if self.lambda_angle.0 < 0.0 {
            return Err(ConfigError::Invalid("lambda_angle must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.thresholds.confidence)
            || !(0.0..=1.0).contains(&self.thresholds.beta_ref)
        {
            return Err(ConfigError::Invalid("thresholds must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.train.decay_at) {
            return Err(ConfigError::Invalid("decay_at must be in [0,1]".into()));
        }
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Write the fully-resolved config next to an output file.
    pub fn echo_beside(&self, output: &std::path::Path) -> Result<(), ConfigError> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".config.json");
        let path = output.with_file_name(name);
        std::fs::write(path, self.to_json_pretty())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn odd_decoder_depth_rejected() {
        let mut c = RunConfig::default();
        c.dims.decoder_layers = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sparse_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"dims": {"d": 16}}"#).unwrap();
        assert_eq!(c.dims.d, 16);
        assert_eq!(c.dims.grid_h, 8);
        assert_eq!(c.thresholds.confidence, 0.7);
        assert_eq!(c.weights.l1, 5.0);
        assert_eq!(c.lambda_angle.0, 0.4);
    }

    #[test]
    fn config_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json_pretty()).unwrap();
        assert_eq!(c.to_json_pretty(), back.to_json_pretty());
    }
}
