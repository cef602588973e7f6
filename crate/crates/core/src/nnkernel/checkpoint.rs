//! Flat JSON parameter checkpoints: a versioned header plus named tensors
//! with explicit shapes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("tensor `{name}` has shape {shape:?} but {len} values")]
    BadShape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(TensorRecord {
            name: name.to_string(),
            shape,
            values,
        });
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        for t in &ckpt.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(CheckpointError::BadShape {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    len: t.values.len(),
                });
            }
        }
        Ok(ckpt)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
