use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::TscSign;
use crate::numerics::{AdamConfig, LbfgsConfig};
use crate::synthdata::{DataConfig, Geometry};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    /// `M_c`, prompt components added per task.
    pub components_per_task: usize,
    /// `L_p`, prompt tokens.
    pub prompt_len: usize,
    /// `N_s`; `None` means one prototype per patch position (`N_p`).
    pub prototypes_per_task: Option<usize>,
    pub tsc_sign: TscSign,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
            components_per_task: 2,
            prompt_len: 4,
            prototypes_per_task: None,
            tsc_sign: TscSign::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.components_per_task == 0 || self.prompt_len == 0 {
            return Err(Error::config(
                "train.components_per_task and train.prompt_len must be positive",
            ));
        }
        if self.prototypes_per_task == Some(0) {
            return Err(Error::config("train.prototypes_per_task must be positive"));
        }
        self.adam.validate()?;
        self.lbfgs.validate()
    }
}

/// Everything that shapes a trained experience.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EngineConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()
    }

    pub fn prototypes_per_task(&self) -> usize {
        self.train
            .prototypes_per_task
            .unwrap_or_else(|| self.backbone.num_patches())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            image_size: self.backbone.image_size,
            patch_size: self.backbone.patch_size,
        }
    }
}

/// A complete run description: engine plus synthetic data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            backbone: self.backbone,
            train: self.train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine().validate()?;
        self.data.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Points every seed at `seed`, keeping the components distinct.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backbone.seed = seed;
        self.train.seed = seed.wrapping_add(1);
        self.data.seed = seed.wrapping_add(2);
        self
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}
