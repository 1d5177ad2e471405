//! Run configuration file: every field defaults except `task` and `out_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdlm::decode::DecodeConfig;
use sdlm::net::{ModelConfig, PosEncoding};
use sdlm::trainer::TrainConfig;
use sdlm::SdlmError;

pub const SEED_ENV: &str = "SDLM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub out_dir: PathBuf,
    /// Drives sample generation, initialization and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelShape,
    /// `train.seed` is replaced by the run seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_samples: 20000, eval_samples: 200, min_len: 2, max_len: 12 }
    }
}

/// Model hyperparameters that are not implied by the task or training setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { dim: 64, n_layers: 2, n_heads: 4, max_positions: 64 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, SdlmError> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    /// Apply the seed override and check cross-section consistency.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self, SdlmError> {
        if let Some(seed) = seed_override {
            self.seed = seed;
        }
        self.train.seed = self.seed;
        sdlm::corpus::build_vocab(&self.task)?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.decode.block_size != self.train.block_size {
            return Err(SdlmError::Config(format!(
                "decode.block_size {} differs from train.block_size {}",
                self.decode.block_size, self.train.block_size
            )));
        }
        if self.data.train_samples == 0 || self.data.eval_samples == 0 {
            return Err(SdlmError::Config("data sample counts must be at least 1".into()));
        }
        self.model_config()?.validate()?;
        Ok(self)
    }

    pub fn model_config(&self) -> Result<ModelConfig, SdlmError> {
        let vocab = sdlm::corpus::build_vocab(&self.task)?;
        Ok(ModelConfig {
            vocab_size: vocab.len(),
            dim: self.model.dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_positions: self.model.max_positions,
            block_size: self.train.block_size,
            pos_encoding: PosEncoding::LearnedAbsolute,
            style: self.train.style(),
        })
    }

    /// Held-out samples use a seed stream disjoint from training data.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ 0x5eed_e7a1
    }
}

pub fn seed_from_env() -> Result<Option<u64>, SdlmError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| SdlmError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
