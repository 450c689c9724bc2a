use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{ArchConfig, Params};
use super::network::Model;
use crate::diffcore::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "rrn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk model: architecture plus every named tensor.
///
/// Floats are written in shortest round-trip form and parsed exactly, so a
/// write/read cycle reproduces every bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub arch: ArchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: Option<usize>) -> Self {
        let tensors = model
            .params
            .names
            .iter()
            .zip(&model.params.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: model.arch.clone(),
            epoch,
            tensors,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint (format {:?})", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut names = Vec::with_capacity(self.tensors.len());
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in self.tensors {
            tensors.push(Mat::from_vec(t.rows, t.cols, t.data)?);
            names.push(t.name);
        }
        Model::new(self.arch, Params { names, tensors })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn save_model(model: &Model, epoch: Option<usize>, path: &Path) -> Result<()> {
    let text = Checkpoint::from_model(model, epoch).to_json()?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_json(&text)?.into_model()
}
