//! Named parameter storage.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleTag {
    TextEncoder,
    ImageEncoder,
    Fusion,
    TextDecoder,
    ImageDecoder,
    Heads,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 6] = [
        ModuleTag::TextEncoder,
        ModuleTag::ImageEncoder,
        ModuleTag::Fusion,
        ModuleTag::TextDecoder,
        ModuleTag::ImageDecoder,
        ModuleTag::Heads,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::TextEncoder => "text_encoder",
            ModuleTag::ImageEncoder => "image_encoder",
            ModuleTag::Fusion => "fusion",
            ModuleTag::TextDecoder => "text_decoder",
            ModuleTag::ImageDecoder => "image_decoder",
            ModuleTag::Heads => "heads",
        }
    }

    /// Modules carried over from detection pre-training into target
    /// fine-tuning. The frozen image backbone travels with them.
    pub fn is_shared(self) -> bool {
        !matches!(self, ModuleTag::ImageDecoder | ModuleTag::Heads)
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub module: ModuleTag,
    pub trainable: bool,
}

/// Parameters in insertion order, addressable by id or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Matrix, module: ModuleTag, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), value, module, trainable });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Glorot-uniform initialisation for a `fan_in x fan_out` weight.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(rng, fan_in, fan_out, limit)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}
