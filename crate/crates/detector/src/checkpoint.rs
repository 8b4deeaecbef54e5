//! Checkpoint container: one JSON document holding the format version,
//! model config, training config, parameters (base64 little-endian),
//! optimiser moments, the training RNG state and, for PPO-distilled
//! students, the gate policy.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::DType;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::Model;
use crate::params::{Adam, AdamState, SavedTensor};
use crate::ppo::PolicyState;
use crate::train::{TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub params: BTreeMap<String, SavedTensor>,
    pub optimizer: Option<AdamState>,
    pub rng: Option<ChaCha8Rng>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            model: model.config.clone(),
            train: None,
            step: 0,
            params: model.params.to_saved()?,
            optimizer: None,
            rng: None,
            policy: None,
        })
    }

    pub fn from_trainer(trainer: &Trainer) -> Result<Self> {
        Ok(Self {
            train: Some(trainer.config.clone()),
            step: trainer.step,
            optimizer: Some(trainer.optimizer.state()?),
            rng: Some(trainer.rng.clone()),
            ..Self::from_model(&trainer.model)?
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string())
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model in f32. When `expected` is given its config must
    /// equal the stored one.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<Model> {
        if let Some(cfg) = expected {
            if cfg != &self.model {
                return Err(ModelError::ConfigMismatch(format!("checkpoint has {:?}, requested {:?}", self.model, cfg)));
            }
        }
        let model = Model::new(self.model.clone(), 0, DType::F32)?;
        model.params.load_saved(&self.params)?;
        Ok(model)
    }

    /// Restores a trainer positioned after `step`, with optimiser and RNG
    /// state when present.
    pub fn to_trainer(&self, config: TrainConfig) -> Result<Trainer> {
        let model = self.to_model(None)?;
        let mut trainer = Trainer::new(model, config)?;
        if let Some(opt) = &self.optimizer {
            trainer.optimizer = Adam::from_state(opt, &trainer.model.params)?;
        }
        if let Some(rng) = &self.rng {
            trainer.rng = rng.clone();
        }
        trainer.step = self.step;
        Ok(trainer)
    }
}
