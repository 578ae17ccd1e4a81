//! Run configuration, read from a sectioned `key = value` (TOML) file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::flowedit::FlowEditConfig;
use crate::repaint::RepaintConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    /// Fraction of a training dataset held out for the loss check when no
    /// separate held-out set is given.
    pub heldout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 20,
            seed: 7,
            heldout_fraction: 0.05,
        }
    }
}

/// Network sizes; the input and condition widths follow from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub cond_hidden: usize,
    pub time_freqs: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            depth: 3,
            cond_hidden: 64,
            time_freqs: 8,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub enabled: bool,
    pub atlas_size: usize,
    /// Side of each auxiliary view in pixels.
    pub view_res: usize,
    pub exponent: f64,
    /// Feathering width of the texture blend mask, in grid voxels.
    pub sigma: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            atlas_size: 512,
            view_res: 128,
            exponent: crate::mesh::DEFAULT_EXPONENT,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workers: usize,
    /// Latent mask growth in latent voxels after pooling the mesh mask.
    pub mask_dilation: usize,
    /// Dump the edit state every this many steps; 0 disables dumps.
    pub trajectory_every: usize,
    pub preview_res: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            mask_dilation: 0,
            trajectory_every: 0,
            preview_res: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub flowedit: FlowEditConfig,
    pub repaint: RepaintConfig,
    pub texture: TextureConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.count == 0 {
            return bad("data.count must be at least 1");
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return bad("data.heldout_fraction must lie in [0, 1)");
        }
        if self.model.hidden == 0 || self.model.depth == 0 || self.model.cond_hidden == 0 {
            return bad("model sizes must be positive");
        }
        if self.run.workers == 0 {
            return bad("run.workers must be at least 1");
        }
        if self.texture.atlas_size < crate::mesh::MIN_CELL || self.texture.view_res == 0 {
            return bad("texture sizes are too small");
        }
        if !(self.texture.sigma > 0.0) || self.texture.exponent < 0.0 {
            return bad("texture.sigma must be positive and texture.exponent non-negative");
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        self.flowedit
            .validate()
            .map_err(|e| Error::Config(format!("flowedit: {e}")))?;
        self.repaint
            .validate()
            .map_err(|e| Error::Config(format!("repaint: {e}")))?;
        Ok(())
    }
}
