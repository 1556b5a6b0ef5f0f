use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors serialized as JSON. `f64` values are written in shortest
/// round-trip form, so save/load is lossless.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push(NamedTensor { name: name.into(), shape: t.shape().to_vec(), data: t.data().to_vec() });
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let nt = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no tensor named {name:?}")))?;
        Tensor::from_vec(&nt.shape, nt.data.clone())
            .map_err(|e| Error::Parse(format!("tensor {name:?}: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
