//! Multimodal samples.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::textnorm::contains_token_span;

/// Candidate sarcasm label. Used both as the prompting stance and as the
/// detection label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stance {
    #[serde(rename = "sarcastic")]
    Sarcastic,
    #[serde(rename = "non-sarcastic")]
    NonSarcastic,
}

pub type MsdLabel = Stance;

impl Stance {
    pub const BOTH: [Stance; 2] = [Stance::Sarcastic, Stance::NonSarcastic];

    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Sarcastic => "sarcastic",
            Stance::NonSarcastic => "non-sarcastic",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sarcastic" => Ok(Stance::Sarcastic),
            "non-sarcastic" => Ok(Stance::NonSarcastic),
            other => Err(Error::RejectedInput(format!("unknown label `{other}`"))),
        }
    }
}

/// An 8-bit raster, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Raster({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::RejectedInput(format!(
                "raster buffer has {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Solid RGB image.
    pub fn solid(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = vec![0u8; width * height * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self { width, height, channels: 3, data }
    }

    /// Paints an RGB rectangle given in normalised center-size coordinates.
    pub fn fill_box(&mut self, b: &BoundingBox, rgb: [u8; 3]) {
        let c = b.corners();
        let x1 = (c.x1 * self.width as f64) as usize;
        let x2 = ((c.x2 * self.width as f64) as usize).min(self.width);
        let y1 = (c.y1 * self.height as f64) as usize;
        let y2 = ((c.y2 * self.height as f64) as usize).min(self.height);
        for y in y1..y2 {
            for x in x1..x2 {
                let o = (y * self.width + x) * self.channels;
                self.data[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// One text + image instance with optional detection label and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image_path: String,
    pub image: Raster,
    pub msd_label: Option<MsdLabel>,
    pub textual_targets: Vec<String>,
    pub visual_targets: Vec<BoundingBox>,
}

impl Sample {
    pub fn new(id: &str, text: &str, image: Raster) -> Self {
        Self {
            id: id.to_string(),
            text: text.to_string(),
            image_path: String::new(),
            image,
            msd_label: None,
            textual_targets: Vec::new(),
            visual_targets: Vec::new(),
        }
    }

    pub fn with_label(mut self, label: MsdLabel) -> Self {
        self.msd_label = Some(label);
        self
    }

    pub fn with_textual_target(mut self, t: &str) -> Self {
        self.textual_targets.push(t.to_string());
        self
    }

    pub fn with_visual_target(mut self, b: BoundingBox) -> Self {
        self.visual_targets.push(b);
        self
    }

    /// A sample carrying targets is a target-identification sample.
    pub fn has_targets(&self) -> bool {
        !self.textual_targets.is_empty() || !self.visual_targets.is_empty()
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &'static str, message: String| Error::Validation {
            record_id: self.id.clone(),
            field,
            message,
        };
        if self.id.is_empty() {
            return Err(err("id", "empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(err("text", "empty text".into()));
        }
        if self.image.channels != 3 {
            return Err(err("image", format!("expected 3 channels, found {}", self.image.channels)));
        }
        for t in &self.textual_targets {
            if !contains_token_span(&self.text, t) {
                return Err(err("textual_targets", format!("`{t}` is not a span of the text")));
            }
        }
        for b in &self.visual_targets {
            b.validate().map_err(|e| err("visual_targets", e.to_string()))?;
        }
        if self.has_targets() && self.msd_label == Some(Stance::NonSarcastic) {
            return Err(err("msd_label", "target samples are sarcastic by construction".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stance_round_trip() {
        for s in Stance::BOTH {
            assert_eq!(s.as_str().parse::<Stance>().unwrap(), s);
        }
        assert!("maybe".parse::<Stance>().is_err());
    }

    #[test]
    fn validation() {
        let img = Raster::solid(4, 4, [0, 0, 0]);
        let ok = Sample::new("a", "the DLR train driver", img.clone()).with_textual_target("train driver");
        ok.validate().unwrap();

        let bad = Sample::new("b", "hello", img.clone()).with_textual_target("bye");
        assert!(matches!(bad.validate(), Err(Error::Validation { field: "textual_targets", .. })));

        let mut zero_w = Sample::new("c", "hello", img.clone());
        zero_w.visual_targets.push(BoundingBox { cx: 0.5, cy: 0.5, w: 0.0, h: 0.2 });
        assert!(zero_w.validate().is_err());

        let neg = Sample::new("d", "hello", img).with_textual_target("hello").with_label(Stance::NonSarcastic);
        assert!(neg.validate().is_err());
    }
}
