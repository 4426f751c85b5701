//! Serializable configuration for the model, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::gla::{AttentionMode, GlaConfig};
use crate::matcher::{DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gla: GlaConfig,
    /// Image extent the positional encoding is normalized to.
    pub train_extent: (usize, usize),
    /// Rescale encoding coordinates when the input extent differs.
    pub normalized_pe: bool,
    pub threshold: f64,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            gla: GlaConfig::default(),
            train_extent: (64, 64),
            normalized_pe: true,
            threshold: DEFAULT_THRESHOLD,
            window: DEFAULT_WINDOW,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.gla.validate()?;
        if self.backbone.channels[2] != self.gla.dim {
            return Err(Error::Config(format!(
                "backbone output width {} must equal the attention width {}",
                self.backbone.channels[2], self.gla.dim
            )));
        }
        if self.backbone.in_channels == 0 || self.backbone.fine_dim == 0 || self.backbone.channels.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        crate::synth::check_extent(self.train_extent)?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("refinement window must be odd, got {}", self.window)));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: AttentionMode) -> ModelConfig {
        let mut c = self.clone();
        c.gla.attention_mode = mode;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub halving_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the flow loss.
    pub alpha: f64,
    pub seed: u64,
    /// Held-out pairs used for the per-epoch report, taken from the end of
    /// the dataset.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_epochs: 1,
            halving_period: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.25,
            seed: 0,
            holdout: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.halving_period == 0 {
            return bad("halving period must be >= 1");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam parameters out of range");
        }
        Ok(())
    }
}

/// Everything a CLI run can be configured with; each section has defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Image extents (pixels, square) for the scaling benchmark.
    pub bench_sizes: Vec<usize>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn bench_sizes(&self) -> Vec<usize> {
        if self.bench_sizes.is_empty() {
            vec![64, 96, 128, 192]
        } else {
            self.bench_sizes.clone()
        }
    }
}
