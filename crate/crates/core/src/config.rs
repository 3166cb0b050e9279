//! JSON run configuration shared by the command-line tools.
//!
//! Every field is optional; missing fields take the defaults below and
//! unknown keys are rejected.
//!
//! ```json
//! {
//!   "model": { "variant": "SRNN_channel", "channel_multiplier": 0.125, "k": 100.0,
//!              "sequence_length": 7, "leaky_slope": 0.1 },
//!   "synthetic": { "texture_size": 512, "texel_size": 0.125, "image_width": 64,
//!                  "image_height": 64, "num_sequences": 8, "sequence_length": 7, ... },
//!   "train": { "base_lr": 1e-4, "lr_power": 0.9, "iterations": 2000, "batch_size": 4,
//!              "beta1": 0.9, "beta2": 0.99, "eps": 1e-8, "weight_decay": 1e-4, "seed": 0 }
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticWorldConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub lr_power: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let tc = TrainConfig {
            iterations: 2000,
            ..TrainConfig::default()
        };
        TrainSection::from(&tc)
    }
}

impl From<&TrainConfig> for TrainSection {
    fn from(tc: &TrainConfig) -> Self {
        TrainSection {
            base_lr: tc.base_lr,
            lr_power: tc.lr_power,
            iterations: tc.iterations,
            batch_size: tc.batch_size,
            beta1: tc.adam.beta1,
            beta2: tc.adam.beta2,
            eps: tc.adam.eps,
            weight_decay: tc.adam.weight_decay,
            seed: tc.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            lr_power: self.lr_power,
            iterations: self.iterations,
            batch_size: self.batch_size,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synthetic: SyntheticWorldConfig,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synthetic.validate()?;
        self.train.to_train_config().validate()
    }
}
