//! Self-describing JSON checkpoints: model config (mode, head type, anchor
//! layout), training counters and named weight tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::model::{DetectorModel, ModelConfig};
use crate::detector::nn::Parameters;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "agnostic-det/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub variant: Option<String>,
    pub config: ModelConfig,
    pub global_step: u64,
    pub model_updates: u64,
    pub tensors: Vec<NamedTensor>,
    /// Discriminator weights, present only when explicitly requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<Vec<NamedTensor>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &DetectorModel,
        variant: Option<&str>,
        global_step: u64,
        model_updates: u64,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            variant: variant.map(str::to_string),
            config: model.config.clone(),
            global_step,
            model_updates,
            tensors: model
                .weights
                .named_tensors()
                .into_iter()
                .map(|(name, data)| NamedTensor { name, data })
                .collect(),
            discriminator: None,
        }
    }

    pub fn to_model(&self) -> Result<DetectorModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        let mut model = DetectorModel::new(self.config.clone(), 0)?;
        let expected = model.weights.named_tensors();
        if expected.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        let mut flat = Vec::with_capacity(model.weights.num_params());
        for ((name, data), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || data.len() != t.data.len() {
                return Err(Error::Data(format!(
                    "tensor `{}` does not match expected `{name}` ({} values)",
                    t.name,
                    data.len()
                )));
            }
            flat.extend_from_slice(&t.data);
        }
        model.weights.load_flat(&flat);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::{HeadType, Mode};

    #[test]
    fn round_trip_is_bit_exact() {
        let model = DetectorModel::new(
            ModelConfig::micro(Mode::TwoStage, HeadType::ClassAware, 3),
            8,
        )
        .unwrap();
        let ckpt = Checkpoint::from_model(&model, Some("aware"), 12, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn mismatched_tensor_is_rejected() {
        let model = DetectorModel::new(
            ModelConfig::micro(Mode::OneStage, HeadType::ClassAgnostic, 3),
            8,
        )
        .unwrap();
        let mut ckpt = Checkpoint::from_model(&model, None, 0, 0);
        ckpt.tensors[0].data.pop();
        assert!(ckpt.to_model().is_err());
    }
}
