use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format_version {0}")]
    Version(u32),
    #[error("architecture mismatch: checkpoint has {found}, network expects {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has {found} values, expected {expected}")]
    SizeMismatch { name: String, expected: usize, found: usize },
}

/// Serialized network: architecture description plus flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: serde_json::Value,
    pub params: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_params(arch: serde_json::Value, params: &ParamSet) -> Self {
        let params = params
            .ids()
            .map(|id| (params.name(id).to_string(), params.value(id).iter().copied().collect()))
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            arch,
            params,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let ckpt: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ckpt.format_version));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Copies the stored values into `params` after checking that the
    /// architecture block and every parameter size match the network.
    pub fn restore(&self, expected_arch: &serde_json::Value, params: &mut ParamSet) -> Result<(), CheckpointError> {
        if &self.arch != expected_arch {
            return Err(CheckpointError::ArchMismatch {
                expected: expected_arch.to_string(),
                found: self.arch.to_string(),
            });
        }
        if let Some(extra) = self.params.keys().find(|k| params.find(k).is_none()) {
            return Err(CheckpointError::UnexpectedParam(extra.clone()));
        }
        let ids: Vec<_> = params.ids().collect();
        for id in &ids {
            let name = params.name(*id).to_string();
            let stored = self.params.get(&name).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let expected = params.value(*id).len();
            if stored.len() != expected {
                return Err(CheckpointError::SizeMismatch {
                    name,
                    expected,
                    found: stored.len(),
                });
            }
        }
        for id in ids {
            let stored = &self.params[params.name(id)];
            params
                .value_mut(id)
                .as_slice_mut()
                .expect("parameters are contiguous")
                .copy_from_slice(stored);
        }
        Ok(())
    }
}
