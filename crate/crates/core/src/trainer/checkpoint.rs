use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const CHECKPOINT_FORMAT: &str = "boicr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One shape-tagged parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Parameter values plus the configuration that produced them. Stored as
/// JSON; floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub config_fingerprint: String,
    /// Id of the run manifest this checkpoint belongs to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_id: Option<String>,
    pub params: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &TrainConfig, step: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step,
            config: config.clone(),
            config_fingerprint: config.fingerprint(),
            manifest_id: None,
            params: model
                .params()
                .into_iter()
                .map(|p| ParamBlock {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model, checking every block's name and shape.
    pub fn model(&self) -> Result<Model> {
        if self.config.fingerprint() != self.config_fingerprint {
            return Err(Error::Checkpoint("config fingerprint does not match the stored config".into()));
        }
        // values are overwritten below; the draw only fixes shapes
        let mut model = Model::from_config(&self.config, &mut ChaCha8Rng::seed_from_u64(0));
        let params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                params.len(),
                self.params.len()
            )));
        }
        for (p, block) in params.into_iter().zip(&self.params) {
            if p.name != block.name || p.value.shape() != (block.rows, block.cols) {
                return Err(Error::Checkpoint(format!(
                    "block `{}` {}x{} does not fit parameter `{}` {}",
                    block.name,
                    block.rows,
                    block.cols,
                    p.name,
                    p.value.shape_str()
                )));
            }
            p.value = Matrix::from_vec(block.rows, block.cols, block.values.clone())
                .map_err(|e| Error::Checkpoint(format!("block `{}`: {e}", block.name)))?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
