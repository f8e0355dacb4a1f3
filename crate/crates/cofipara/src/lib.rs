//! Files, backends and the command line around `cofipara-core`.

pub mod checkpoint_io;
pub mod cli;
pub mod config_io;
pub mod dataset;
pub mod error;
pub mod fixtures;
#[cfg(feature = "http")]
pub mod http;
pub mod pipeline;
pub mod rationales;

pub use cofipara_core as core;
pub use error::{Error, Result};
