//! Experiment configuration: a strict TOML document with one block per
//! concern. Unknown keys are rejected before any compute starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::casdm::ModelConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metricfn::{Backbone, ExtractorSpec, MetricTransform};
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "one")]
    pub lambda_eps: f64,
    #[serde(default = "one")]
    pub lambda_x0: f64,
    #[serde(default = "one")]
    pub lambda_mu: f64,
    #[serde(default = "tenth")]
    pub lambda_lpips: f64,
    #[serde(default = "default_backbone")]
    pub backbone: Backbone,
    /// Side length images are resized to before feature extraction.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub extractor_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

fn default_backbone() -> Backbone {
    Backbone::LpipsAvgpool
}

fn default_resolution() -> usize {
    32
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_eps: 1.0,
            lambda_x0: 1.0,
            lambda_mu: 1.0,
            lambda_lpips: 0.1,
            backbone: Backbone::LpipsAvgpool,
            resolution: 32,
            extractor_seed: 0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_eps: self.lambda_eps,
            lambda_x0: self.lambda_x0,
            lambda_mu: self.lambda_mu,
            lambda_lpips: self.lambda_lpips,
        }
    }

    pub fn transform(&self) -> MetricTransform {
        MetricTransform {
            resolution: self.resolution,
        }
    }

    pub fn extractor_spec(&self, in_channels: usize) -> ExtractorSpec {
        ExtractorSpec {
            backbone: self.backbone.clone(),
            in_channels,
            seed: self.extractor_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    /// Checkpoint cadence in steps; 0 keeps only the initial and final ones.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// proxy-FD cadence in steps; 0 disables in-training evaluation.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub ema: bool,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_eval_samples() -> usize {
    512
}

fn default_ema_decay() -> f64 {
    0.9999
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SamplerConfig,
    pub data: DataConfig,
}

/// Desk-scale defaults.
pub const DESK_PRESET: &str = include_str!("../../../configs/desk.toml");
/// Full-length schedule and sampler settings with the desk-sized network.
pub const REFERENCE_PRESET: &str = include_str!("../../../configs/reference.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn desk() -> Self {
        Self::from_toml(DESK_PRESET).expect("desk preset is valid")
    }

    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_PRESET).expect("reference preset is valid")
    }

    /// Canonical TOML rendering; formatting and key order of the source
    /// file do not affect it.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex-encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Cross-block consistency. All failures are config errors.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        let m = &self.model;
        if m.image_size != self.data.image_size || m.image_channels != self.data.channels {
            return Err(Error::Config(format!(
                "model image {}x{}x{} does not match data {}x{}x{}",
                m.image_size, m.image_size, m.image_channels, self.data.image_size, self.data.image_size, self.data.channels
            )));
        }
        m.network_spec().validate().map_err(cfg_err)?;
        if self.schedule.steps < 2 {
            return Err(Error::Config("schedule.steps must be >= 2".into()));
        }
        if self.sample.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sample.steps {} exceeds schedule.steps {}",
                self.sample.steps, self.schedule.steps
            )));
        }
        self.loss.weights().validate().map_err(cfg_err)?;
        self.sample.validate().map_err(cfg_err)?;
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if t.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(Error::Config("train.ema_decay must lie in [0, 1)".into()));
        }
        if t.eval_every > 0 && t.eval_samples < 2 {
            return Err(Error::Config("train.eval_samples must be >= 2".into()));
        }
        let res = self.loss.resolution;
        if res == 0 || res % 16 != 0 {
            return Err(Error::Config(format!("loss.resolution {res} must be a positive multiple of 16")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let d = ExperimentConfig::desk();
        assert_eq!((d.schedule.steps, d.train.batch, d.train.steps, d.sample.steps), (1000, 32, 2000, 50));
        let p = ExperimentConfig::reference();
        assert_eq!((p.schedule.steps, p.sample.steps), (4000, 100));
        assert_eq!(p.loss.weights(), LossWeights::default());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let text = DESK_PRESET.replace("[train]", "[train]\nlearning_rate = 0.1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = ExperimentConfig::desk();
        let b = ExperimentConfig::from_toml(&format!("# comment\n{DESK_PRESET}\n\n")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.lr *= 2.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let text = DESK_PRESET.replacen("image_size = 8", "image_size = 16", 1);
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
