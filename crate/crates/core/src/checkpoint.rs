//! In-memory checkpoints and the pre-training to fine-tuning handoff.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::CofiPara;
use crate::params::ModuleTag;
use crate::rationale::Phase;
use crate::tensor::Matrix;

/// One named tensor plus its manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub module: ModuleTag,
    pub trainable: bool,
    pub value: Matrix,
}

impl TensorEntry {
    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phase: Phase,
    pub config: TrainConfig,
    /// Completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &CofiPara, phase: Phase, epoch: usize) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, p)| TensorEntry { name: p.name.clone(), module: p.module, trainable: p.trainable, value: p.value.clone() })
            .collect();
        Self { phase, config: model.config.clone(), epoch, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model; every tensor must match by name and shape.
    pub fn to_model(&self) -> Result<CofiPara> {
        let mut model = CofiPara::new(self.config.clone())?;
        let n = copy_tensors(&mut model, self, |_| true)?;
        if n != model.params.len() || n != self.tensors.len() {
            return Err(Error::CheckpointMismatch(alloc::vec![format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                model.params.len()
            )]));
        }
        Ok(model)
    }

    /// Checks manifest invariants: unique names, frozen image encoder.
    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("duplicate tensor names in checkpoint"));
        }
        if let Some(t) = self.tensors.iter().find(|t| t.module == ModuleTag::ImageEncoder && t.trainable) {
            return Err(Error::contract(format!("image encoder tensor `{}` flagged trainable", t.name)));
        }
        Ok(())
    }
}

/// Copies tensors selected by module from `ckpt` into `model`. Returns the
/// number of copied tensors or the list of mismatches.
fn copy_tensors(model: &mut CofiPara, ckpt: &Checkpoint, select: impl Fn(ModuleTag) -> bool) -> Result<usize> {
    let mut mismatched = Vec::new();
    let mut updates = Vec::new();
    for (id, p) in model.params.iter() {
        if !select(p.module) {
            continue;
        }
        match ckpt.get(&p.name) {
            None => mismatched.push(format!("{} (missing)", p.name)),
            Some(t) if t.shape() != p.value.shape() => mismatched.push(format!(
                "{} (checkpoint {:?}, model {:?})",
                p.name,
                t.shape(),
                p.value.shape()
            )),
            Some(t) if t.module != p.module => mismatched.push(format!("{} (module {} vs {})", p.name, t.module, p.module)),
            Some(t) => updates.push((id, t.value.clone())),
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::CheckpointMismatch(mismatched));
    }
    let n = updates.len();
    for (id, v) in updates {
        model.params.get_mut(id).value = v;
    }
    Ok(n)
}

/// Loads the modules shared between the two phases from a pre-training
/// checkpoint. Returns the names of the copied tensors.
pub fn load_shared(model: &mut CofiPara, pretrained: &Checkpoint) -> Result<Vec<String>> {
    if pretrained.phase != Phase::Pretrain {
        return Err(Error::contract("fine-tuning must start from a pre-training checkpoint"));
    }
    copy_tensors(model, pretrained, ModuleTag::is_shared)?;
    Ok(model
        .params
        .iter()
        .filter(|(_, p)| p.module.is_shared())
        .map(|(_, p)| p.name.clone())
        .collect())
}
