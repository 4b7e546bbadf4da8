//! Run configuration loaded from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::optim::AdamWConfig;
use crate::voxel::{AugmentConfig, VoxelGridSpec};

/// Coarsest stride in the network; every grid axis must be a multiple.
pub const MAX_STRIDE: u32 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub max_lr: f64,
    pub optimizer: AdamWConfig,
    /// Initial `log σ²` for the seg, bev and det tasks.
    pub init_log_var: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            max_lr: 3e-3,
            optimizer: AdamWConfig::default(),
            init_log_var: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: VoxelGridSpec,
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.grid.grid_shape()?;
        if shape.iter().any(|&s| s % MAX_STRIDE != 0) {
            return Err(Error::Grid(format!(
                "grid shape {shape:?} must be a multiple of {MAX_STRIDE} on every axis"
            )));
        }
        self.backbone.validate()?;
        self.heads.validate()?;
        if !(self.train.max_lr > 0.0) {
            return Err(Error::Config("max_lr must be positive".into()));
        }
        let o = &self.train.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}
