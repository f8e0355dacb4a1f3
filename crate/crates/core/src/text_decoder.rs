//! Autoregressive text decoder whose every layer adds a text-to-image
//! cross-attention over the selected visual queries:
//! `H^{i+1} = LM_dec^i(H^i) + CrossAttn(H^i, I_Q)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, NodeId};
use crate::boxes::BoundingBox;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{residual, Attention, Builder, FeedForward, LayerNorm, Linear};
use crate::params::ParamId;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, BOS, EOS};

/// Hidden state between decoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Matrix,
    pub layer_index: usize,
    pub total_layers: usize,
}

/// Output of the full model for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<TokenId>,
    pub decoded_text: String,
    /// Candidate boxes with confidences, highest confidence first. Empty in
    /// the pre-training phase.
    pub boxes: Vec<(BoundingBox, f64)>,
}

impl Prediction {
    /// Boxes at or above `threshold`.
    pub fn emitted(&self, threshold: f64) -> impl Iterator<Item = &(BoundingBox, f64)> {
        self.boxes.iter().filter(move |(_, c)| *c >= threshold)
    }
}

pub(crate) struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    pub(crate) cross_attn: Attention,
}

impl DecoderLayer {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(b, &format!("{name}.self_attn"), d, cfg.heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d, d * cfg.ffn_mult)?,
            cross_attn: Attention::new(b, &format!("{name}.cross_attn"), d, cfg.heads)?,
        })
    }

    /// The plain language-model layer: causal self-attention then feed-forward.
    pub(crate) fn lm_dec(&self, g: &mut Graph<'_>, h: NodeId) -> NodeId {
        let x = residual(g, h, &self.ln1, |g, n| self.self_attn.forward(g, n, n, None, true));
        residual(g, x, &self.ln2, |g, n| self.ffn.forward(g, n))
    }

    pub(crate) fn forward(&self, g: &mut Graph<'_>, h: NodeId, i_q: NodeId) -> NodeId {
        let plain = self.lm_dec(g, h);
        let attended = self.cross_attn.forward(g, h, i_q, None, false);
        g.add(plain, attended)
    }
}

pub(crate) struct TextDecoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    pub(crate) layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    lm_head: Linear,
    max_len: usize,
}

impl TextDecoder {
    pub fn new(b: &mut Builder<'_>, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        let tok_emb = b.weight("text_decoder.tok_emb", cfg.vocab_size(), d)?;
        let pos_emb = b.weight("text_decoder.pos_emb", cfg.max_target_tokens, d)?;
        let layers = (0..cfg.text_decoder_layers)
            .map(|i| DecoderLayer::new(b, &format!("text_decoder.layer{i}"), cfg))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(b, "text_decoder.ln_f", d)?;
        let lm_head = Linear::new(b, "text_decoder.lm_head", d, cfg.vocab_size(), true)?;
        Ok(Self { tok_emb, pos_emb, layers, ln_f, lm_head, max_len: cfg.max_target_tokens })
    }

    /// Token plus position embedding of the decoder input.
    pub(crate) fn embed(&self, g: &mut Graph<'_>, input_ids: &[TokenId]) -> NodeId {
        let emb = g.param(self.tok_emb);
        let x = g.gather_rows(emb, input_ids);
        let pos = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..input_ids.len()).collect();
        let p = g.gather_rows(pos, &positions);
        g.add(x, p)
    }

    pub(crate) fn head(&self, g: &mut Graph<'_>, h: NodeId) -> NodeId {
        let h = self.ln_f.forward(g, h);
        self.lm_head.forward(g, h)
    }

    /// Logits (`t x V`) for a teacher-forced input sequence.
    pub fn logits(&self, g: &mut Graph<'_>, input_ids: &[TokenId], i_q: NodeId) -> NodeId {
        let mut h = self.embed(g, input_ids);
        for layer in &self.layers {
            h = layer.forward(g, h, i_q);
        }
        self.head(g, h)
    }

    /// Greedy decoding; stops at end-of-sequence or after `max_len` tokens.
    pub fn greedy(&self, g: &mut Graph<'_>, i_q: NodeId, max_len: usize) -> Vec<TokenId> {
        let limit = max_len.min(self.max_len);
        let mut out = Vec::new();
        let mut input = vec![BOS];
        while out.len() < limit {
            let logits = self.logits(g, &input, i_q);
            let v = g.value(logits);
            let last = v.row(v.rows() - 1);
            let next = argmax(last);
            out.push(next);
            if next == EOS {
                break;
            }
            input.push(next);
        }
        out
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forcing pair `(input, target)`: input is `BOS + target[..n-1]`,
/// target is the text bytes plus `EOS`, truncated to `max_len`.
pub fn teacher_forcing(target: &[TokenId], max_len: usize) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    if target.is_empty() {
        return Err(Error::contract("empty target sequence"));
    }
    let mut tgt = target.to_vec();
    if tgt.len() > max_len {
        tgt.truncate(max_len);
        if let Some(last) = tgt.last_mut() {
            *last = EOS;
        }
    }
    let mut input = Vec::with_capacity(tgt.len());
    input.push(BOS);
    input.extend_from_slice(&tgt[..tgt.len() - 1]);
    Ok((input, tgt))
}

/// Mean token cross-entropy of `logits` rows against `target_tokens`.
pub fn text_loss(logits: &Matrix, target_tokens: &[TokenId]) -> Result<f64> {
    if target_tokens.is_empty() {
        return Err(Error::contract("text loss needs a non-empty target"));
    }
    if logits.rows() < target_tokens.len() {
        return Err(Error::Shape {
            op: "text_loss",
            expected: (target_tokens.len(), logits.cols()),
            found: logits.shape(),
        });
    }
    if let Some(&bad) = target_tokens.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::contract(format!("target token {bad} outside vocabulary")));
    }
    let store = crate::params::ParamStore::default();
    let mut g = Graph::new(&store);
    let rows: Vec<usize> = (0..target_tokens.len()).collect();
    let l = g.constant(logits.gather_rows(&rows));
    let ce = g.cross_entropy(l, target_tokens);
    Ok(g.value(ce).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut logits = Matrix::filled(3, 5, -1e3);
        for (r, t) in [1usize, 4, 0].iter().enumerate() {
            logits.set(r, *t, 1e3);
        }
        assert!(text_loss(&logits, &[1, 4, 0]).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Matrix::zeros(4, 8);
        let l = text_loss(&logits, &[0, 3, 7, 2]).unwrap();
        assert!((l - 2.0794415416798357).abs() < 1e-12);
    }

    #[test]
    fn empty_target_rejected() {
        assert!(text_loss(&Matrix::zeros(2, 3), &[]).is_err());
        assert!(teacher_forcing(&[], 4).is_err());
    }

    #[test]
    fn teacher_forcing_shifts_and_truncates() {
        let (i, t) = teacher_forcing(&[10, 11, EOS], 8).unwrap();
        assert_eq!(i, [BOS, 10, 11]);
        assert_eq!(t, [10, 11, EOS]);
        let (i, t) = teacher_forcing(&[10, 11, 12, 13, EOS], 3).unwrap();
        assert_eq!(t, [10, 11, EOS]);
        assert_eq!(i, [BOS, 10, 11]);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
