//! Dataset manifests and the re-annotation pass that turns large boxes over
//! printed text into textual targets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::rationale::ClientError;
use crate::sample::Sample;
use crate::textnorm::{contains_token_span, normalize};

pub const DEFAULT_AREA_THRESHOLD: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCounts {
    pub textual_target_count: usize,
    pub visual_target_count: usize,
    /// Number of records.
    pub total: usize,
}

impl TargetCounts {
    pub fn of(records: &[Sample]) -> Self {
        Self {
            textual_target_count: records.iter().map(|s| s.textual_targets.len()).sum(),
            visual_target_count: records.iter().map(|s| s.visual_targets.len()).sum(),
            total: records.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<Sample>,
    pub counts: TargetCounts,
}

impl DatasetManifest {
    /// Validates every record and checks id uniqueness.
    pub fn new(split: Split, records: Vec<Sample>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation { record_id: r.id.clone(), field: "id", message: "duplicate id".into() });
            }
        }
        let counts = TargetCounts::of(&records);
        Ok(Self { split, records, counts })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReannotationAction {
    KeepBox,
    ConvertToText,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReannotationDecision {
    pub sample_id: String,
    /// Position of the box in the sample's original `visual_targets`.
    pub box_index: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub area_ratio: f64,
    pub flagged: bool,
    pub ocr_text: Option<String>,
    pub action: ReannotationAction,
}

impl ReannotationDecision {
    pub fn validate(&self, threshold: f64) -> Result<()> {
        if self.flagged != (self.area_ratio > threshold) {
            return Err(Error::contract(format!("`{}` box {}: flag disagrees with ratio", self.sample_id, self.box_index)));
        }
        if self.action == ReannotationAction::ConvertToText && self.ocr_text.as_deref().is_none_or(str::is_empty) {
            return Err(Error::contract(format!("`{}` box {}: conversion without text", self.sample_id, self.box_index)));
        }
        Ok(())
    }
}

/// One decision per box; a box is flagged when its normalised area exceeds
/// `threshold`.
pub fn area_ratio_filter(sample: &Sample, threshold: f64) -> Vec<ReannotationDecision> {
    sample
        .visual_targets
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let area_ratio = b.w * b.h;
            ReannotationDecision {
                sample_id: sample.id.clone(),
                box_index: i,
                bbox: *b,
                area_ratio,
                flagged: area_ratio > threshold,
                ocr_text: None,
                action: ReannotationAction::KeepBox,
            }
        })
        .collect()
}

/// Text read from a box, with the confirmation verdict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcrReading {
    pub text: String,
    pub confirmed: bool,
}

pub trait OcrClient {
    fn read(&self, sample: &Sample, region: &BoundingBox) -> core::result::Result<OcrReading, ClientError>;
}

/// Offline OCR: answers from a table keyed by `(sample id, box index)`. Boxes
/// missing from the table fail with a transport error.
#[derive(Clone, Debug, Default)]
pub struct MockOcr {
    readings: BTreeMap<(String, usize), OcrReading>,
}

impl MockOcr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reading(mut self, sample_id: &str, box_index: usize, text: &str, confirmed: bool) -> Self {
        self.readings.insert((sample_id.into(), box_index), OcrReading { text: text.into(), confirmed });
        self
    }
}

impl OcrClient for MockOcr {
    fn read(&self, sample: &Sample, region: &BoundingBox) -> core::result::Result<OcrReading, ClientError> {
        let idx = sample.visual_targets.iter().position(|b| b == region);
        idx.and_then(|i| self.readings.get(&(sample.id.clone(), i)))
            .cloned()
            .ok_or_else(|| ClientError::Transport(format!("no reading for `{}`", sample.id)))
    }
}

/// Queries OCR for every flagged box and proposes conversion when the reading
/// is confirmed. Failures leave the box in place.
pub fn propose_conversions(sample: &Sample, decisions: &mut [ReannotationDecision], ocr: &dyn OcrClient) {
    for d in decisions.iter_mut().filter(|d| d.flagged) {
        match ocr.read(sample, &d.bbox) {
            Ok(r) => {
                let usable = r.confirmed && !normalize(&r.text).is_empty();
                d.ocr_text = Some(r.text);
                d.action = if usable { ReannotationAction::ConvertToText } else { ReannotationAction::KeepBox };
            }
            Err(e) => {
                log::warn!("ocr failed for `{}` box {}: {e}", d.sample_id, d.box_index);
                d.action = ReannotationAction::KeepBox;
            }
        }
    }
}

/// Per-decision override from a manual review pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewOverride {
    pub sample_id: String,
    pub box_index: usize,
    pub action: ReannotationAction,
    #[serde(default)]
    pub ocr_text: Option<String>,
}

pub fn apply_review(decisions: &mut [ReannotationDecision], overrides: &[ReviewOverride]) -> Result<()> {
    for o in overrides {
        let d = decisions
            .iter_mut()
            .find(|d| d.sample_id == o.sample_id && d.box_index == o.box_index)
            .ok_or_else(|| Error::contract(format!("review names unknown box {} of `{}`", o.box_index, o.sample_id)))?;
        if let Some(t) = &o.ocr_text {
            d.ocr_text = Some(t.clone());
        }
        d.action = o.action;
        if d.action == ReannotationAction::ConvertToText && d.ocr_text.as_deref().is_none_or(str::is_empty) {
            return Err(Error::contract(format!("review converts box {} of `{}` without text", o.box_index, o.sample_id)));
        }
    }
    Ok(())
}

/// Rewrites the sample according to its decisions. Converted text is added as
/// a textual target and, when not already a span of the text, appended as an
/// `[OCR: ...]` segment.
pub fn apply_decisions(sample: &Sample, decisions: &[ReannotationDecision]) -> Result<Sample> {
    let mut out = sample.clone();
    let mut keep = alloc::vec![true; sample.visual_targets.len()];
    for d in decisions.iter().filter(|d| d.sample_id == sample.id) {
        if d.box_index >= keep.len() {
            return Err(Error::contract(format!("`{}` has no box {}", sample.id, d.box_index)));
        }
        match d.action {
            ReannotationAction::KeepBox => {}
            ReannotationAction::Drop => keep[d.box_index] = false,
            ReannotationAction::ConvertToText => {
                let text = d.ocr_text.as_deref().unwrap_or_default().trim();
                if normalize(text).is_empty() {
                    return Err(Error::contract(format!("`{}` box {}: conversion without text", sample.id, d.box_index)));
                }
                keep[d.box_index] = false;
                if !contains_token_span(&out.text, text) {
                    out.text = format!("{} [OCR: {text}]", out.text);
                }
                if !out.textual_targets.iter().any(|t| normalize(t) == normalize(text)) {
                    out.textual_targets.push(text.into());
                }
            }
        }
    }
    out.visual_targets = sample.visual_targets.iter().zip(&keep).filter(|(_, k)| **k).map(|(b, _)| *b).collect();
    Ok(out)
}

/// Filter, OCR and apply in one go, without a review pass.
pub fn convert_ocr_targets(
    sample: &Sample,
    threshold: f64,
    ocr: &dyn OcrClient,
) -> Result<(Sample, Vec<ReannotationDecision>)> {
    let mut decisions = area_ratio_filter(sample, threshold);
    propose_conversions(sample, &mut decisions, ocr);
    let out = apply_decisions(sample, &decisions)?;
    Ok((out, decisions))
}

/// Outcome of re-annotating a whole split.
#[derive(Clone, Debug, PartialEq)]
pub struct Reannotation {
    pub records: Vec<Sample>,
    pub decisions: Vec<ReannotationDecision>,
    pub before: TargetCounts,
    pub after: TargetCounts,
}

/// Re-annotates every record; output is ordered by id.
pub fn reannotate(
    records: &[Sample],
    threshold: f64,
    ocr: &dyn OcrClient,
    review: &[ReviewOverride],
) -> Result<Reannotation> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0,1]")));
    }
    let mut sorted: Vec<&Sample> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut decisions = Vec::new();
    for s in &sorted {
        let mut d = area_ratio_filter(s, threshold);
        propose_conversions(s, &mut d, ocr);
        decisions.extend(d);
    }
    apply_review(&mut decisions, review)?;
    let out = sorted
        .iter()
        .map(|s| apply_decisions(s, &decisions))
        .collect::<Result<Vec<_>>>()?;
    Ok(Reannotation {
        before: TargetCounts::of(records),
        after: TargetCounts::of(&out),
        records: out,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{Raster, Stance};

    fn sample(boxes: &[(f64, f64)]) -> Sample {
        let mut s = Sample::new("s1", "look at this", Raster::solid(8, 8, [0, 0, 0])).with_label(Stance::Sarcastic);
        for &(w, h) in boxes {
            s = s.with_visual_target(BoundingBox::new(0.5, 0.5, w, h).unwrap());
        }
        s
    }

    #[test]
    fn filter_examples() {
        let d = area_ratio_filter(&sample(&[(0.4, 0.4), (0.1, 0.1)]), DEFAULT_AREA_THRESHOLD);
        assert!((d[0].area_ratio - 0.16).abs() < 1e-12 && d[0].flagged);
        assert!((d[1].area_ratio - 0.01).abs() < 1e-12 && !d[1].flagged);
        assert!(area_ratio_filter(&sample(&[(0.1, 0.1)]), 0.0).iter().all(|d| d.flagged));
    }

    #[test]
    fn confirmed_reading_converts() {
        let s = sample(&[(0.4, 0.4)]);
        let ocr = MockOcr::new().with_reading("s1", 0, "I", true);
        let (out, d) = convert_ocr_targets(&s, DEFAULT_AREA_THRESHOLD, &ocr).unwrap();
        assert!(out.visual_targets.is_empty());
        assert_eq!(out.textual_targets, alloc::vec![String::from("I")]);
        assert_eq!(out.text, "look at this [OCR: I]");
        assert_eq!(d[0].action, ReannotationAction::ConvertToText);
        out.validate().unwrap();
    }

    #[test]
    fn present_text_is_not_appended() {
        let s = sample(&[(0.4, 0.4)]);
        let ocr = MockOcr::new().with_reading("s1", 0, "this", true);
        let (out, _) = convert_ocr_targets(&s, DEFAULT_AREA_THRESHOLD, &ocr).unwrap();
        assert_eq!(out.text, "look at this");
    }

    #[test]
    fn unconfirmed_or_failed_keeps_box() {
        let s = sample(&[(0.4, 0.4), (0.5, 0.5)]);
        let ocr = MockOcr::new().with_reading("s1", 0, "I", false);
        let (out, d) = convert_ocr_targets(&s, DEFAULT_AREA_THRESHOLD, &ocr).unwrap();
        assert_eq!(out, s);
        assert!(d.iter().all(|d| d.action == ReannotationAction::KeepBox));
    }

    #[test]
    fn no_flags_is_identity() {
        let s = sample(&[(0.1, 0.1)]);
        let (out, _) = convert_ocr_targets(&s, DEFAULT_AREA_THRESHOLD, &MockOcr::new()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn review_can_drop_and_rejects_textless_conversion() {
        let s = sample(&[(0.4, 0.4)]);
        let drop = [ReviewOverride { sample_id: "s1".into(), box_index: 0, action: ReannotationAction::Drop, ocr_text: None }];
        let r = reannotate(core::slice::from_ref(&s), 0.15, &MockOcr::new(), &drop).unwrap();
        assert_eq!(r.after.visual_target_count, 0);
        assert_eq!(r.after.textual_target_count, 0);

        let bad = [ReviewOverride {
            sample_id: "s1".into(),
            box_index: 0,
            action: ReannotationAction::ConvertToText,
            ocr_text: None,
        }];
        assert!(reannotate(core::slice::from_ref(&s), 0.15, &MockOcr::new(), &bad).is_err());
    }

    #[test]
    fn manifest_counts_and_duplicates() {
        let a = sample(&[(0.2, 0.2)]);
        let mut b = a.clone().with_textual_target("look");
        b.id = "s2".into();
        let m = DatasetManifest::new(Split::Dev, alloc::vec![a.clone(), b]).unwrap();
        assert_eq!(m.counts, TargetCounts { textual_target_count: 1, visual_target_count: 2, total: 2 });
        assert!(DatasetManifest::new(Split::Dev, alloc::vec![a.clone(), a]).is_err());
    }
}
