//! Query-based detection decoder, box/confidence heads and the detection loss.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, NodeId};
use crate::boxes::BoundingBox;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::layers::{residual, Attention, Builder, FeedForward, LayerNorm, Linear};
use crate::matching::{Assignment, LossWeights};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Visual queries between detection-decoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDecoderState {
    pub i_q: Matrix,
    pub layer_index: usize,
    pub total_layers: usize,
}

pub(crate) struct ImageDecoderLayer {
    ln1: LayerNorm,
    pub(crate) self_attn: Attention,
    ln2: LayerNorm,
    pub(crate) image_attn: Attention,
    ln3: LayerNorm,
    pub(crate) text_attn: Attention,
    ln4: LayerNorm,
    ffn: FeedForward,
}

impl ImageDecoderLayer {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(b, &format!("{name}.self_attn"), d, cfg.heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
            image_attn: Attention::new(b, &format!("{name}.image_attn"), d, cfg.heads)?,
            ln3: LayerNorm::new(b, &format!("{name}.ln3"), d)?,
            text_attn: Attention::new(b, &format!("{name}.text_attn"), d, cfg.heads)?,
            ln4: LayerNorm::new(b, &format!("{name}.ln4"), d)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d, d * cfg.ffn_mult)?,
        })
    }

    /// Self-attention, then attention to `I_B`, then to `H_T0`, then the
    /// feed-forward block; each as a pre-norm residual.
    pub(crate) fn forward(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        i_b: NodeId,
        h_t0: NodeId,
        text_mask: &[bool],
    ) -> NodeId {
        let x = residual(g, x, &self.ln1, |g, n| self.self_attn.forward(g, n, n, None, false));
        let x = residual(g, x, &self.ln2, |g, n| self.image_attn.forward(g, n, i_b, None, false));
        let x = residual(g, x, &self.ln3, |g, n| self.text_attn.forward(g, n, h_t0, Some(text_mask), false));
        self.feed_forward(g, x)
    }

    pub(crate) fn feed_forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        residual(g, x, &self.ln4, |g, n| self.ffn.forward(g, n))
    }
}

pub(crate) struct ImageDecoder {
    pub(crate) layers: Vec<ImageDecoderLayer>,
}

impl ImageDecoder {
    pub fn new(b: &mut Builder<'_>, cfg: &TrainConfig) -> Result<Self> {
        let layers = (0..cfg.image_decoder_layers)
            .map(|j| ImageDecoderLayer::new(b, &format!("image_decoder.layer{j}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, i_q: NodeId, i_b: NodeId, h_t0: NodeId, text_mask: &[bool]) -> NodeId {
        let mut x = i_q;
        for layer in &self.layers {
            x = layer.forward(g, x, i_b, h_t0, text_mask);
        }
        x
    }
}

/// Box regression (sigmoid-squashed center-size) and confidence logit.
pub(crate) struct BoxHeads {
    pub(crate) ln: LayerNorm,
    pub(crate) box_hidden: Linear,
    pub(crate) box_out: Linear,
    pub(crate) conf: Linear,
}

impl BoxHeads {
    pub fn new(b: &mut Builder<'_>, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln: LayerNorm::new(b, "heads.ln", d)?,
            box_hidden: Linear::new(b, "heads.box_hidden", d, d, true)?,
            box_out: Linear::new(b, "heads.box_out", d, 4, true)?,
            conf: Linear::new(b, "heads.conf", d, 1, true)?,
        })
    }

    /// Returns `(boxes n_q x 4 in (0,1), confidence logits n_q x 1)`.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> (NodeId, NodeId) {
        let x = self.ln.forward(g, x);
        let h = self.box_hidden.forward(g, x);
        let h = g.gelu(h);
        let raw = self.box_out.forward(g, h);
        let boxes = g.sigmoid(raw);
        let conf = self.conf.forward(g, x);
        (boxes, conf)
    }
}

/// Reads head outputs into `(box, confidence)` candidates.
pub fn candidates(boxes: &Matrix, conf_logits: &Matrix) -> Vec<(BoundingBox, f64)> {
    (0..boxes.rows())
        .map(|i| {
            let r = boxes.row(i);
            (BoundingBox { cx: r[0], cy: r[1], w: r[2], h: r[3] }, sigmoid(conf_logits.get(i, 0)))
        })
        .collect()
}

/// Every loss term of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_text: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_cls: f64,
    pub l_img: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    /// Text-only loss (pre-training).
    pub fn text_only(l_text: f64, w: LossWeights) -> Self {
        Self {
            l_text,
            l_l1: 0.0,
            l_giou: 0.0,
            l_cls: 0.0,
            l_img: 0.0,
            total: l_text,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }

    /// Combines components: `l_img = a*l1 + b*giou + g*cls`, `total = l_img + l_text`.
    pub fn combined(l_text: f64, l_l1: f64, l_giou: f64, l_cls: f64, w: LossWeights) -> Self {
        let l_img = combine_image(l_l1, l_giou, l_cls, w);
        Self { l_text, l_l1, l_giou, l_cls, l_img, total: l_img + l_text, alpha: w.alpha, beta: w.beta, gamma: w.gamma }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_text, self.l_l1, self.l_giou, self.l_cls, self.l_img, self.total].iter().all(|v| v.is_finite())
    }
}

pub fn combine_image(l_l1: f64, l_giou: f64, l_cls: f64, w: LossWeights) -> f64 {
    w.alpha * l_l1 + w.beta * l_giou + w.gamma * l_cls
}

/// Graph nodes for the detection loss terms.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ImageLossNodes {
    pub l1: NodeId,
    pub giou: NodeId,
    pub cls: NodeId,
    pub img: NodeId,
}

struct CornerNodes {
    x1: NodeId,
    y1: NodeId,
    x2: NodeId,
    y2: NodeId,
}

fn clip01(g: &mut Graph<'_>, x: NodeId, zeros: NodeId, ones: NodeId) -> NodeId {
    let lo = g.max(x, zeros);
    g.min(lo, ones)
}

fn corners(g: &mut Graph<'_>, b: NodeId, zeros: NodeId, ones: NodeId) -> CornerNodes {
    let cx = g.slice_cols(b, 0, 1);
    let cy = g.slice_cols(b, 1, 1);
    let w = g.slice_cols(b, 2, 1);
    let h = g.slice_cols(b, 3, 1);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw);
    let y1 = g.sub(cy, hh);
    let x2 = g.add(cx, hw);
    let y2 = g.add(cy, hh);
    CornerNodes {
        x1: clip01(g, x1, zeros, ones),
        y1: clip01(g, y1, zeros, ones),
        x2: clip01(g, x2, zeros, ones),
        y2: clip01(g, y2, zeros, ones),
    }
}

/// `mean(1 - GIoU)` between matched rows of `pred` and `target` (both `k x 4`).
fn giou_loss(g: &mut Graph<'_>, pred: NodeId, target: NodeId) -> NodeId {
    let k = g.shape(pred).0;
    let zeros = g.constant(Matrix::zeros(k, 1));
    let ones = g.constant(Matrix::filled(k, 1, 1.0));
    let p = corners(g, pred, zeros, ones);
    let t = corners(g, target, zeros, ones);

    let ix1 = g.max(p.x1, t.x1);
    let iy1 = g.max(p.y1, t.y1);
    let ix2 = g.min(p.x2, t.x2);
    let iy2 = g.min(p.y2, t.y2);
    let iw = g.sub(ix2, ix1);
    let iw = g.max(iw, zeros);
    let ih = g.sub(iy2, iy1);
    let ih = g.max(ih, zeros);
    let inter = g.mul(iw, ih);

    let pw = g.sub(p.x2, p.x1);
    let ph = g.sub(p.y2, p.y1);
    let pa = g.mul(pw, ph);
    let tw = g.sub(t.x2, t.x1);
    let th = g.sub(t.y2, t.y1);
    let ta = g.mul(tw, th);
    let sum = g.add(pa, ta);
    let union = g.sub(sum, inter);

    let hx1 = g.min(p.x1, t.x1);
    let hy1 = g.min(p.y1, t.y1);
    let hx2 = g.max(p.x2, t.x2);
    let hy2 = g.max(p.y2, t.y2);
    let hw = g.sub(hx2, hx1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul(hw, hh);

    let iou = g.div(inter, union);
    let gap = g.sub(hull, union);
    let penalty = g.div(gap, hull);
    let giou = g.sub(iou, penalty);
    let loss = g.sub(ones, giou);
    g.mean(loss)
}

/// Detection loss on graph nodes for a fixed assignment.
pub(crate) fn image_loss_nodes(
    g: &mut Graph<'_>,
    boxes: NodeId,
    conf_logits: NodeId,
    gts: &[BoundingBox],
    assignment: &Assignment,
    w: LossWeights,
) -> ImageLossNodes {
    let (l1, giou) = if assignment.pairs.is_empty() {
        (g.constant(Matrix::scalar(0.0)), g.constant(Matrix::scalar(0.0)))
    } else {
        let pred_idx: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let target = Matrix::from_rows(
            &assignment.pairs.iter().map(|&(_, t)| gts[t].to_array()).collect::<Vec<_>>(),
        );
        let pred = g.gather_rows(boxes, &pred_idx);
        let target = g.constant(target);
        let diff = g.sub(pred, target);
        let abs = g.abs(diff);
        let l1 = g.mean(abs);
        (l1, giou_loss(g, pred, target))
    };

    let n = assignment.n_preds;
    let mask = assignment.matched_mask();
    let pos = Matrix::from_vec(n, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap();
    let neg = pos.map(|v| 1.0 - v);
    let pos = g.constant(pos);
    let neg = g.constant(neg);
    let lp = g.log_sigmoid(conf_logits);
    let flipped = g.scale(conf_logits, -1.0);
    let ln = g.log_sigmoid(flipped);
    let a = g.mul(pos, lp);
    let b = g.mul(neg, ln);
    let ll = g.add(a, b);
    let mean_ll = g.mean(ll);
    let cls = g.scale(mean_ll, -1.0);

    let a = g.scale(l1, w.alpha);
    let b = g.scale(giou, w.beta);
    let c = g.scale(cls, w.gamma);
    let ab = g.add(a, b);
    let img = g.add(ab, c);
    ImageLossNodes { l1, giou, cls, img }
}

/// Detection loss on plain values. `confidences` are probabilities in `(0,1)`.
pub fn image_loss(
    preds: &[(BoundingBox, f64)],
    gts: &[BoundingBox],
    assignment: &Assignment,
    w: LossWeights,
) -> LossBreakdown {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let boxes = Matrix::from_rows(&preds.iter().map(|(b, _)| b.to_array()).collect::<Vec<_>>());
    let logits = Matrix::from_vec(
        preds.len(),
        1,
        preds.iter().map(|(_, c)| {
            let c = c.clamp(1e-15, 1.0 - 1e-15);
            libm::log(c / (1.0 - c))
        }).collect(),
    )
    .unwrap();
    let boxes = g.constant(boxes);
    let logits = g.constant(logits);
    let nodes = image_loss_nodes(&mut g, boxes, logits, gts, assignment, w);
    LossBreakdown::combined(
        0.0,
        g.value(nodes.l1).item(),
        g.value(nodes.giou).item(),
        g.value(nodes.cls).item(),
        w,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::giou;
    use crate::matching::match_predictions;

    #[test]
    fn weighted_unit_components() {
        let l = LossBreakdown::combined(0.0, 1.0, 1.0, 1.0, LossWeights::default());
        assert!((l.l_img - 0.301).abs() < 1e-12);
        assert_eq!(l.total, l.l_img);
    }

    #[test]
    fn perfect_fit_is_near_zero() {
        let gt = BoundingBox::new(0.4, 0.5, 0.3, 0.2).unwrap();
        let preds = [(gt, 1.0 - 1e-12)];
        let a = match_predictions(&preds, &[gt], LossWeights::default()).unwrap();
        let l = image_loss(&preds, &[gt], &a, LossWeights::default());
        assert!(l.l_l1 < 1e-12 && l.l_giou < 1e-12 && l.l_cls < 1e-9, "{l:?}");
    }

    #[test]
    fn no_ground_truth_is_classification_only() {
        let p = BoundingBox::new(0.4, 0.5, 0.3, 0.2).unwrap();
        let preds = [(p, 0.3), (p, 0.6)];
        let a = match_predictions(&preds, &[], LossWeights::default()).unwrap();
        let l = image_loss(&preds, &[], &a, LossWeights::default());
        assert_eq!((l.l_l1, l.l_giou), (0.0, 0.0));
        let expected_cls = -((0.7f64).ln() + (0.4f64).ln()) / 2.0;
        assert!((l.l_cls - expected_cls).abs() < 1e-12);
        assert!((l.l_img - 0.1 * expected_cls).abs() < 1e-12);
    }

    #[test]
    fn giou_term_matches_scalar_giou() {
        let p = BoundingBox::new(0.4, 0.5, 0.3, 0.2).unwrap();
        let t = BoundingBox::new(0.6, 0.45, 0.2, 0.4).unwrap();
        let a = Assignment { pairs: alloc::vec![(0, 0)], n_preds: 1 };
        let l = image_loss(&[(p, 0.5)], &[t], &a, LossWeights::default());
        assert!((l.l_giou - (1.0 - giou(&p, &t))).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_zero_head_is_half() {
        let c = candidates(&Matrix::filled(2, 4, sigmoid(0.0)), &Matrix::zeros(2, 1));
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].0.to_array(), [0.5; 4]);
        assert_eq!(c[0].1, 0.5);
    }
}
