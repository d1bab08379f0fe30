//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, epoch, parameter names and shapes, optimizer scalars),
//! then every parameter and optimizer buffer as little-endian `f64` in
//! logical element order. All integers are little-endian.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::autograd::Array;
use crate::backbone::{build_backbone, Backbone, BackboneConfig, Classifier};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::trainer::{Trainer, TrainingConfig};

pub const MAGIC: &[u8; 8] = b"CAMCKPT\n";
pub const FORMAT_VERSION: u32 = 1;
/// Byte offset of the version field.
pub const VERSION_OFFSET: usize = 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: BackboneConfig,
    training: TrainingConfig,
    augment: AugmentPolicy,
    epoch: usize,
    params: Vec<(String, Vec<usize>)>,
    optimizer_kind: OptimizerKind,
    learning_rate: f64,
    total_steps: u64,
    steps_taken: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BackboneConfig,
    pub training: TrainingConfig,
    pub augment: AugmentPolicy,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<(String, Array)>,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer<'_, Backbone>) -> Self {
        let model = trainer.model();
        let p = model.parameters();
        Self {
            model: model.config().clone(),
            training: trainer.config().clone(),
            augment: trainer.policy().clone(),
            epoch: trainer.epochs_done(),
            params: p
                .names()
                .iter()
                .cloned()
                .zip(p.tensors().iter().map(|t| t.value().clone()))
                .collect(),
            optimizer: trainer.optimizer().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            training: self.training.clone(),
            augment: self.augment.clone(),
            epoch: self.epoch,
            params: self.params.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect(),
            optimizer_kind: self.optimizer.kind,
            learning_rate: self.optimizer.learning_rate,
            total_steps: self.optimizer.total_steps,
            steps_taken: self.optimizer.steps_taken,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.params.iter().map(|(_, a)| a).chain(&self.optimizer.buffers) {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = MAGIC.len() + 4 + 8;
        if bytes.len() < fixed || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("missing checkpoint magic".into()));
        }
        let found = u32::from_le_bytes(bytes[VERSION_OFFSET..VERSION_OFFSET + 4].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes
            .get(fixed..fixed.saturating_add(len))
            .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let shapes: Vec<&[usize]> = header.params.iter().map(|(_, s)| s.as_slice()).collect();
        let per_param = header.optimizer_kind.buffers_per_param();
        let all_shapes: Vec<&[usize]> = shapes.iter().copied().chain(
            (0..per_param).flat_map(|_| shapes.iter().copied()),
        )
        .collect();
        let need: usize = all_shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 8;
        let mut body = &bytes[fixed + len..];
        if body.len() != need {
            return Err(Error::Corrupt(format!("expected {need} data bytes, found {}", body.len())));
        }
        let mut arrays = Vec::with_capacity(all_shapes.len());
        for shape in all_shapes {
            let n: usize = shape.iter().product();
            let (chunk, rest) = body.split_at(n * 8);
            body = rest;
            let values = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(ArrayD::from_shape_vec(IxDyn(shape), values).unwrap());
        }
        let buffers = arrays.split_off(header.params.len());
        Ok(Self {
            model: header.model,
            training: header.training,
            augment: header.augment,
            epoch: header.epoch,
            params: header.params.into_iter().map(|(n, _)| n).zip(arrays).collect(),
            optimizer: Optimizer {
                kind: header.optimizer_kind,
                learning_rate: header.learning_rate,
                total_steps: header.total_steps,
                steps_taken: header.steps_taken,
                buffers,
            },
        })
    }

    /// Writes through a temporary file so an interrupted save keeps the
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the backbone and installs the saved parameters.
    pub fn build_model(&self) -> Result<Backbone> {
        let mut model = build_backbone(&self.model)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::Corrupt(format!(
                "{} saved parameters for a model with {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, (name, value)) in self.params.iter().enumerate() {
            if &store.names()[i] != name {
                return Err(Error::Corrupt(format!("parameter {i} is {name}, model expects {}", store.names()[i])));
            }
            store.set(i, value.clone()).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        Ok(model)
    }

    /// A trainer positioned right after the saved epoch.
    pub fn resume<'a>(&self, split: &'a DatasetSplit) -> Result<Trainer<'a, Backbone>> {
        Trainer::resume(
            self.build_model()?,
            split,
            self.training.clone(),
            self.augment.clone(),
            self.optimizer.clone(),
            self.epoch,
        )
    }
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer<'_, Backbone>) -> Result<()> {
    Checkpoint::from_trainer(trainer).save(path)
}

/// The model, its training configuration and the completed epoch count.
pub fn load_checkpoint(path: &Path) -> Result<(Backbone, TrainingConfig, usize)> {
    let c = Checkpoint::load(path)?;
    Ok((c.build_model()?, c.training.clone(), c.epoch))
}
