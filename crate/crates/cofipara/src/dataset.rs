//! JSONL datasets and image loading.
//!
//! One record per line:
//! `{id, text, image_path, msd_label?, textual_targets[], visual_targets[{cx,cy,w,h}], rationale_pos?, rationale_neg?}`.
//! Keys are written in that fixed order, so a load/save round trip is
//! byte-identical for files this module wrote.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cofipara_core::reannotate::{DatasetManifest, Split};
use cofipara_core::trainer::Annotated;
use cofipara_core::{BoundingBox, RationaleSet, Raster, Sample, Stance};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backend id given to rationales read back from a dataset file.
pub const FILE_BACKEND: &str = "file";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msd_label: Option<Stance>,
    #[serde(default)]
    pub textual_targets: Vec<String>,
    #[serde(default)]
    pub visual_targets: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_pos: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_neg: Option<String>,
}

impl Record {
    pub fn from_sample(s: &Sample, rationales: Option<&RationaleSet>) -> Self {
        Self {
            id: s.id.clone(),
            text: s.text.clone(),
            image_path: s.image_path.clone(),
            msd_label: s.msd_label,
            textual_targets: s.textual_targets.clone(),
            visual_targets: s.visual_targets.clone(),
            rationale_pos: rationales.map(|r| r.r_pos.clone()),
            rationale_neg: rationales.and_then(|r| r.r_neg.clone()),
        }
    }

    pub fn to_sample(&self, image: Raster) -> Sample {
        Sample {
            id: self.id.clone(),
            text: self.text.clone(),
            image_path: self.image_path.clone(),
            image,
            msd_label: self.msd_label,
            textual_targets: self.textual_targets.clone(),
            visual_targets: self.visual_targets.clone(),
        }
    }

    /// Rationales stored in the record, if the sarcastic one is present.
    pub fn rationales(&self) -> Option<RationaleSet> {
        self.rationale_pos.as_ref().map(|r_pos| RationaleSet {
            r_pos: r_pos.clone(),
            r_neg: self.rationale_neg.clone(),
            backend_id: FILE_BACKEND.into(),
            prompt_hash: 0,
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    read_jsonl(path)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    write_jsonl(path, records)
}

/// Reads any JSONL file, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads an image file as RGB and resizes it to `size x size`. Boxes are
/// normalised, so the aspect change leaves them valid.
pub fn load_image(path: &Path, size: usize) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle)
    };
    Ok(Raster::new(size, size, 3, rgb.into_raw())?)
}

pub fn save_image(path: &Path, raster: &Raster) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(raster.width as u32, raster.height as u32, raster.data.clone())
        .ok_or_else(|| Error::Image { path: path.into(), message: "raster is not RGB".into() })?;
    buf.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// A loaded split together with any rationales stored in it.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub rationales: Vec<Option<RationaleSet>>,
}

impl LoadedDataset {
    /// Pairs every sample with its rationales; fails on the first record
    /// without them.
    pub fn annotated(&self) -> Result<Vec<Annotated>> {
        self.manifest
            .records
            .iter()
            .zip(&self.rationales)
            .map(|(s, r)| {
                r.clone().map(|r| Annotated::new(s.clone(), r)).ok_or_else(|| {
                    cofipara_core::Error::Validation {
                        record_id: s.id.clone(),
                        field: "rationale_pos",
                        message: "record has no rationales; run the rationales step first".into(),
                    }
                    .into()
                })
            })
            .collect()
    }
}

/// Loads and validates a split. Image paths are resolved against `images`.
pub fn load_dataset(path: &Path, images: &Path, split: Split, image_size: usize) -> Result<LoadedDataset> {
    let records = read_records(path)?;
    let missing: Vec<PathBuf> =
        records.iter().map(|r| images.join(&r.image_path)).filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        let image = load_image(&images.join(&r.image_path), image_size)?;
        samples.push(r.to_sample(image));
    }
    let rationales = records.iter().map(Record::rationales).collect();
    let manifest = DatasetManifest::new(split, samples)?;
    Ok(LoadedDataset { manifest, rationales })
}
