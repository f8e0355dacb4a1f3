//! Evaluation: exact match and token F1 for textual targets, COCO-style AP for
//! boxes, binary detection metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoundingBox};
use crate::error::{Error, Result};
use crate::sample::Stance;
use crate::textnorm::{normalize, normalize_tokens, split_targets};

/// 1 when the normalised predicted target set equals the gold set.
pub fn exact_match(pred: &str, gold: &[String]) -> u8 {
    let mut p = split_targets(pred);
    let mut g: Vec<String> = gold.iter().map(|s| normalize(s)).filter(|s| !s.is_empty()).collect();
    p.sort();
    p.dedup();
    g.sort();
    g.dedup();
    u8::from(p == g)
}

/// Token-overlap F1 over the multisets of normalised tokens.
pub fn token_f1(pred: &str, gold: &[String]) -> f64 {
    let p: Vec<String> = split_targets(pred).iter().flat_map(|t| normalize_tokens(t)).collect();
    let g: Vec<String> = gold.iter().flat_map(|t| normalize_tokens(t)).collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// `(ap, ap50, ap75)` as percentages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Greedy COCO matching of one image at one threshold. Returns, per
/// prediction in the given order, whether it is a true positive.
fn match_image(preds: &[(BoundingBox, f64)], order: &[usize], gts: &[BoundingBox], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for &pi in order {
        let mut best = None;
        let mut best_iou = thr;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&preds[pi].0, gt);
            if v >= best_iou {
                // strictly better overlap wins; first ground truth on ties
                if best.is_none() || v > best_iou {
                    best_iou = v;
                    best = Some(gi);
                }
            }
        }
        if let Some(gi) = best {
            taken[gi] = true;
            tp[pi] = true;
        }
    }
    tp
}

/// Average precision at one IoU threshold with 101-point interpolation, in `[0,1]`.
/// Returns `None` when there is no ground truth at all.
pub fn average_precision(preds: &[Vec<(BoundingBox, f64)>], gts: &[Vec<BoundingBox>], thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    // (confidence, image, index) ordered by descending confidence, then image, then index
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    let mut tp_flags: Vec<Vec<bool>> = Vec::with_capacity(preds.len());
    for (img, p) in preds.iter().enumerate() {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].1.total_cmp(&p[a].1).then(a.cmp(&b)));
        let empty = Vec::new();
        let g = gts.get(img).unwrap_or(&empty);
        tp_flags.push(match_image(p, &order, g, thr));
        all.extend(p.iter().enumerate().map(|(i, (_, c))| (*c, img, i)));
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(all.len());
    let mut precision = Vec::with_capacity(all.len());
    for &(_, img, i) in &all {
        if tp_flags[img][i] {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(interpolated_ap(&recall, &precision))
}

/// 101-point interpolated AP of a precision/recall curve.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        if envelope[i + 1] > envelope[i] {
            envelope[i] = envelope[i + 1];
        }
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // first curve point with recall >= r
        let idx = recall.partition_point(|&x| x < r);
        if idx < envelope.len() {
            total += envelope[idx];
        }
    }
    total / 101.0
}

/// COCO-style AP (mean over 0.50:0.05:0.95), AP50 and AP75, as percentages.
/// Images without any ground truth contribute only false positives; a set
/// with no ground truth anywhere scores 0.
pub fn coco_ap(preds: &[Vec<(BoundingBox, f64)>], gts: &[Vec<BoundingBox>]) -> ApSummary {
    let at = |thr: f64| average_precision(preds, gts, thr).unwrap_or(0.0) * 100.0;
    let per: Vec<f64> = coco_thresholds().into_iter().map(at).collect();
    ApSummary { ap: per.iter().sum::<f64>() / per.len() as f64, ap50: per[0], ap75: per[5] }
}

/// Accuracy, precision, recall, F1 (percentages) with `sarcastic` positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn msd_metrics(preds: &[Stance], golds: &[Stance]) -> Result<BinaryMetrics> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::contract("no predictions"));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let (pp, gp) = (*p == Stance::Sarcastic, *g == Stance::Sarcastic);
        correct += usize::from(pp == gp);
        tp += usize::from(pp && gp);
        fp += usize::from(pp && !gp);
        fn_ += usize::from(!pp && gp);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(BinaryMetrics {
        accuracy: 100.0 * ratio(correct, preds.len()),
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
    })
}

/// Evaluation report; every field a percentage. Detection fields are only
/// present for the pre-training phase, target fields only for fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap75: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msd_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msd_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msd_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msd_f1: Option<f64>,
}

impl MetricReport {
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        [
            ("em", self.em),
            ("f1", self.f1),
            ("ap", self.ap),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("msd_accuracy", self.msd_accuracy),
            ("msd_precision", self.msd_precision),
            ("msd_recall", self.msd_recall),
            ("msd_f1", self.msd_f1),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric          value\n");
        out.push_str("--------------  --------\n");
        for (k, v) in self.fields() {
            out.push_str(&format!("{k:<14}  {v:>8.2}\n"));
        }
        out
    }
}

/// Textual-target and box metrics over a split.
pub fn target_report(
    pred_texts: &[String],
    gold_texts: &[Vec<String>],
    pred_boxes: &[Vec<(BoundingBox, f64)>],
    gold_boxes: &[Vec<BoundingBox>],
) -> Result<MetricReport> {
    if pred_texts.len() != gold_texts.len() || pred_boxes.len() != gold_boxes.len() {
        return Err(Error::contract("prediction and gold counts differ"));
    }
    let n = pred_texts.len().max(1) as f64;
    let em = pred_texts.iter().zip(gold_texts).map(|(p, g)| f64::from(exact_match(p, g))).sum::<f64>() / n;
    let f1 = pred_texts.iter().zip(gold_texts).map(|(p, g)| token_f1(p, g)).sum::<f64>() / n;
    let ap = coco_ap(pred_boxes, gold_boxes);
    Ok(MetricReport {
        em: Some(100.0 * em),
        f1: Some(100.0 * f1),
        ap: Some(ap.ap),
        ap50: Some(ap.ap50),
        ap75: Some(ap.ap75),
        ..MetricReport::default()
    })
}

pub fn detection_report(preds: &[Stance], golds: &[Stance]) -> Result<MetricReport> {
    let m = msd_metrics(preds, golds)?;
    Ok(MetricReport {
        msd_accuracy: Some(m.accuracy),
        msd_precision: Some(m.precision),
        msd_recall: Some(m.recall),
        msd_f1: Some(m.f1),
        ..MetricReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("dlr train driver", &s(&["dlr train driver"])), 1);
        assert_eq!(exact_match("train driver", &s(&["dlr train driver"])), 0);
        assert_eq!(exact_match("A; b", &s(&["b", "a"])), 1);
        assert_eq!(exact_match("", &s(&[])), 1);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("x y", &s(&["y x"])), 1.0);
        assert!((token_f1("train driver", &s(&["dlr train driver"])) - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("cat", &s(&["dog"])), 0.0);
        assert_eq!(token_f1("", &s(&[])), 1.0);
        assert_eq!(token_f1("", &s(&["dog"])), 0.0);
        assert_eq!(token_f1("dog", &s(&[])), 0.0);
    }

    #[test]
    fn single_prediction_ap() {
        let gt = BoundingBox::from_corners(0.0, 0.0, 0.5, 0.5).unwrap();
        // same height, width grown to give IoU 0.6
        let pred = BoundingBox::from_corners(0.0, 0.0, 0.5 / 0.6, 0.5).unwrap();
        assert!((iou(&pred, &gt) - 0.6).abs() < 1e-12);
        let r = coco_ap(&[vec![(pred, 0.9)]], &[vec![gt]]);
        assert!((r.ap50 - 100.0).abs() < 1e-9);
        assert_eq!(r.ap75, 0.0);
    }

    #[test]
    fn perfect_detector() {
        let gts = vec![
            vec![BoundingBox::new(0.3, 0.3, 0.2, 0.2).unwrap()],
            vec![BoundingBox::new(0.6, 0.5, 0.3, 0.4).unwrap(), BoundingBox::new(0.2, 0.8, 0.1, 0.1).unwrap()],
        ];
        let preds: Vec<Vec<_>> = gts.iter().map(|g| g.iter().map(|b| (*b, 1.0)).collect()).collect();
        let r = coco_ap(&preds, &gts);
        assert!((r.ap - 100.0).abs() < 1e-9 && (r.ap50 - 100.0).abs() < 1e-9 && (r.ap75 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn msd_examples() {
        use Stance::*;
        let all = msd_metrics(&[Sarcastic, NonSarcastic], &[Sarcastic, NonSarcastic]).unwrap();
        assert_eq!((all.accuracy, all.precision, all.recall, all.f1), (100.0, 100.0, 100.0, 100.0));

        let m = msd_metrics(&[Sarcastic; 4], &[Sarcastic, NonSarcastic, Sarcastic, NonSarcastic]).unwrap();
        assert_eq!((m.accuracy, m.recall, m.precision), (50.0, 100.0, 50.0));
        assert!((m.f1 - 66.666_666_666_666_67).abs() < 1e-9);

        let z = msd_metrics(&[NonSarcastic; 2], &[Sarcastic; 2]).unwrap();
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));

        assert!(msd_metrics(&[Sarcastic], &[]).is_err());
    }

    #[test]
    fn report_table_lists_present_fields() {
        let r = detection_report(&[Stance::Sarcastic], &[Stance::Sarcastic]).unwrap();
        let t = r.to_table();
        assert!(t.contains("msd_accuracy"));
        assert!(!t.contains("ap50"));
    }
}
