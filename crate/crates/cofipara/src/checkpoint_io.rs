//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `CFPRCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every
//! tensor's values as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use cofipara_core::checkpoint::{Checkpoint, TensorEntry};
use cofipara_core::{Matrix, ModuleTag, Phase, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFPRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    phase: Phase,
    epoch: usize,
    config: TrainConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    module: ModuleTag,
    trainable: bool,
    shape: [usize; 2],
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let manifest = Manifest {
        phase: ckpt.phase,
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                module: t.module,
                trainable: t.trainable,
                shape: [t.value.rows(), t.value.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let scalars: usize = ckpt.tensors.iter().map(|t| t.value.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ckpt.tensors {
        for v in t.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    let mut data = &bytes[20 + len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let [rows, cols] = e.shape;
        let n = rows * cols;
        if data.len() < 8 * n {
            return Err(bad(format!("truncated data for `{}`", e.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        let value = Matrix::from_vec(rows, cols, values)?;
        tensors.push(TensorEntry { name: e.name, module: e.module, trainable: e.trainable, value });
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    let ckpt = Checkpoint { phase: manifest.phase, config: manifest.config, epoch: manifest.epoch, tensors };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cofipara_core::CofiPara;

    #[test]
    fn round_trip_is_byte_identical() {
        let model = CofiPara::new(TrainConfig::tiny()).unwrap();
        let ckpt = Checkpoint::from_model(&model, Phase::Pretrain, 3);
        let bytes = encode(&ckpt);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let model = CofiPara::new(TrainConfig::tiny()).unwrap();
        let mut bytes = encode(&Checkpoint::from_model(&model, Phase::Finetune, 0));
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        bytes.push(0);
        assert!(decode(&bytes, Path::new("m")).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("m")).is_err());
    }
}
