//! JSON checkpoints holding a model's config and every parameter tensor.

use std::path::Path;

use eqgat_autodiff::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{EqgatError, Result};
use crate::model::{EncoderConfig, Model};
use crate::training::TargetNormalizer;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub seed: u64,
    /// Optimizer steps taken when the parameters were captured.
    pub step: u64,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub units: Option<String>,
    #[serde(default)]
    pub normalizer: Option<TargetNormalizer>,
    pub parameters: IndexMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, step: u64) -> Self {
        let parameters = model
            .params()
            .iter()
            .map(|(name, t)| {
                let stored = StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                };
                (name.to_string(), stored)
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            seed,
            step,
            target: None,
            units: None,
            normalizer: None,
            parameters,
        }
    }

    /// Rebuilds the model; parameter names and shapes must match the config.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(EqgatError::Checkpoint(format!(
                "unsupported format_version {}, expected {FORMAT_VERSION}",
                self.format_version
            )));
        }
        let mut model = Model::new(self.config.clone(), self.seed)?;
        let expected = model.params().len();
        if self.parameters.len() != expected {
            return Err(EqgatError::Checkpoint(format!(
                "holds {} parameter tensors, the config defines {expected}",
                self.parameters.len()
            )));
        }
        let mut values = Vec::with_capacity(expected);
        for (name, _) in model.params().iter() {
            let stored = self
                .parameters
                .get(name)
                .ok_or_else(|| EqgatError::Checkpoint(format!("missing parameter `{name}`")))?;
            let tensor = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| EqgatError::Checkpoint(format!("parameter `{name}`: {e}")))?;
            values.push(tensor);
        }
        model
            .params_mut()
            .load_values(values)
            .map_err(|e| EqgatError::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EqgatError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EqgatError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
