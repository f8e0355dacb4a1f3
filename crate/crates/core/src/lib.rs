//! Coarse-to-fine multimodal sarcasm detection and target identification.
//!
//! The crate is `no_std` with `alloc`. File formats, the rationale backends
//! that talk to the network and the command line live in the `cofipara` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod image_decoder;
mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rationale;
pub mod reannotate;
pub mod sample;
pub mod tensor;
pub mod text_decoder;
pub mod textnorm;
pub mod tokenizer;
pub mod trainer;

pub use boxes::{giou, iou, BoundingBox};
pub use checkpoint::{load_shared, Checkpoint, TensorEntry};
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::{CofiPara, TrainExample};
pub use params::ModuleTag;
pub use rationale::{pack_input, AugmentedText, Phase, RationaleSet};
pub use sample::{Raster, Sample, Stance};
pub use tensor::Matrix;
pub use text_decoder::Prediction;
