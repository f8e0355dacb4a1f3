//! Text and image encoding, bi-directional cross-attention fusion and
//! language-guided query selection.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, NodeId, SoftmaxMask};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{residual, Attention, Builder, FeedForward, LayerNorm, Linear, LN_EPS};
use crate::params::{ParamId, ParamStore};
use crate::sample::Raster;
use crate::tensor::Matrix;
use crate::tokenizer::TokenId;

/// Encoded text `H_T` (`m x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub h_t: Matrix,
    pub token_ids: Vec<TokenId>,
    pub attention_mask: Vec<bool>,
    /// Token count before truncation, when truncation happened.
    pub truncated_from: Option<usize>,
}

/// Encoded image `I_E` (`n x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub i_e: Matrix,
    pub patch_grid: (usize, usize),
}

/// Single-head projection weights for [`cross_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub d_k: usize,
}

impl AttentionWeights {
    /// Identity projections of width `d`.
    pub fn identity(d: usize) -> Self {
        Self { w_q: Matrix::identity(d), w_k: Matrix::identity(d), w_v: Matrix::identity(d), d_k: d }
    }

    fn check(&self, query: &Matrix, kv: &Matrix) -> Result<()> {
        if self.d_k == 0 {
            return Err(Error::contract("d_k must be positive"));
        }
        let expect = |op, m: &Matrix, rows: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != self.d_k {
                return Err(Error::Shape { op, expected: (rows, self.d_k), found: m.shape() });
            }
            Ok(())
        };
        expect("cross_attention W_Q", &self.w_q, query.cols())?;
        expect("cross_attention W_K", &self.w_k, kv.cols())?;
        if self.w_v.rows() != kv.cols() {
            return Err(Error::Shape {
                op: "cross_attention W_V",
                expected: (kv.cols(), self.w_v.cols()),
                found: self.w_v.shape(),
            });
        }
        Ok(())
    }
}

/// Attended text `H_T^0` and attended image `I_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub h_t0: Matrix,
    pub i_b: Matrix,
    pub text_mask: Vec<bool>,
}

/// The `n_q` image features most relevant to the text.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedQueries {
    pub indices: Vec<usize>,
    pub i_q: Matrix,
    pub n_q: usize,
}

/// `softmax(Q K^T / sqrt(d_k)) V` on already-projected matrices, with
/// `d_k = Q.cols()`. Returns the output and the row-stochastic attention matrix.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(Error::Shape { op: "attend keys", expected: (k.rows(), q.cols()), found: k.shape() });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape { op: "attend values", expected: (k.rows(), v.cols()), found: v.shape() });
    }
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let scores = g.matmul_t(qn, kn);
    let scores = g.scale(scores, 1.0 / libm::sqrt(q.cols() as f64));
    let p = g.softmax_rows(scores, SoftmaxMask::default());
    let out = g.matmul(p, vn);
    Ok((g.value(out).clone(), g.value(p).clone()))
}

/// Cross-attention with `Q = query W_Q`, `K = kv W_K`, `V = kv W_V`.
/// Returns the output and the attention matrix.
pub fn cross_attention_with_probs(query: &Matrix, kv: &Matrix, weights: &AttentionWeights) -> Result<(Matrix, Matrix)> {
    weights.check(query, kv)?;
    let q = query.matmul(&weights.w_q)?;
    let k = kv.matmul(&weights.w_k)?;
    let v = kv.matmul(&weights.w_v)?;
    attend(&q, &k, &v)
}

pub fn cross_attention(query: &Matrix, kv: &Matrix, weights: &AttentionWeights) -> Result<Matrix> {
    cross_attention_with_probs(query, kv, weights).map(|(o, _)| o)
}

/// Relevance of each image feature to the text: `max_m (I_B H_T0^T)[i, m]` over
/// unmasked text positions.
pub fn relevance_scores(i_b: &Matrix, h_t0: &Matrix, text_mask: &[bool]) -> Result<Vec<f64>> {
    if i_b.cols() != h_t0.cols() {
        return Err(Error::Shape { op: "relevance_scores", expected: (h_t0.rows(), i_b.cols()), found: h_t0.shape() });
    }
    if text_mask.len() != h_t0.rows() {
        return Err(Error::contract(format!(
            "text mask has {} entries for {} positions",
            text_mask.len(),
            h_t0.rows()
        )));
    }
    if !text_mask.iter().any(|&m| m) {
        return Err(Error::contract("every text position is masked"));
    }
    let s = i_b.matmul_t(h_t0)?;
    Ok((0..s.rows())
        .map(|i| {
            s.row(i)
                .iter()
                .zip(text_mask)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Indices of the `n_q` highest scores, descending, ties to the lower index.
pub fn top_k_indices(scores: &[f64], n_q: usize) -> Result<Vec<usize>> {
    if n_q == 0 || n_q > scores.len() {
        return Err(Error::contract(format!("n_q = {n_q} outside [1, {}]", scores.len())));
    }
    // adding 0.0 folds -0.0 into 0.0 so signed zeros tie
    let keys: Vec<f64> = scores.iter().map(|&s| s + 0.0).collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(n_q);
    Ok(idx)
}

pub fn select_queries(fused: &FusedFeatures, n_q: usize) -> Result<SelectedQueries> {
    let scores = relevance_scores(&fused.i_b, &fused.h_t0, &fused.text_mask)?;
    let indices = top_k_indices(&scores, n_q)?;
    let i_q = fused.i_b.gather_rows(&indices);
    Ok(SelectedQueries { indices, i_q, n_q })
}

pub(crate) struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn new(b: &mut Builder<'_>, name: &str, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
            attn: Attention::new(b, &format!("{name}.self_attn"), d, cfg.heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), d, d * cfg.ffn_mult)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: NodeId, mask: &[bool]) -> NodeId {
        let x = residual(g, x, &self.ln1, |g, n| self.attn.forward(g, n, n, Some(mask), false));
        residual(g, x, &self.ln2, |g, n| self.ffn.forward(g, n))
    }
}

/// Transformer encoder over byte tokens.
pub(crate) struct TextEncoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

impl TextEncoder {
    pub fn new(b: &mut Builder<'_>, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        let tok_emb = b.weight("text_encoder.tok_emb", cfg.vocab_size(), d)?;
        let pos_emb = b.weight("text_encoder.pos_emb", cfg.max_text_tokens, d)?;
        let layers = (0..cfg.text_encoder_layers)
            .map(|i| EncoderLayer::new(b, &format!("text_encoder.layer{i}"), cfg))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(b, "text_encoder.ln_f", d)?;
        Ok(Self { tok_emb, pos_emb, layers, ln_f })
    }

    pub fn forward(&self, g: &mut Graph<'_>, ids: &[TokenId], mask: &[bool]) -> NodeId {
        let emb = g.param(self.tok_emb);
        let x = g.gather_rows(emb, ids);
        let pos = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions);
        let mut x = g.add(x, p);
        for layer in &self.layers {
            x = layer.forward(g, x, mask);
        }
        self.ln_f.forward(g, x)
    }
}

/// Two-stage patch encoder: small patches are embedded, then 2x2 neighbourhoods
/// are merged and projected to `d`. Always frozen.
pub(crate) struct ImageEncoder {
    stage1: Linear,
    stage2: Linear,
    pos: ParamId,
    image_size: usize,
    patch: usize,
}

impl ImageEncoder {
    pub fn new(b: &mut Builder<'_>, cfg: &TrainConfig) -> Result<Self> {
        let d = cfg.d_model;
        let half = cfg.patch_size / 2;
        let stage1 = Linear::new(b, "image_encoder.stage1", 3 * half * half, d / 2, true)?;
        let stage2 = Linear::new(b, "image_encoder.stage2", 2 * d, d, true)?;
        let pos = b.weight("image_encoder.pos", cfg.n_patches(), d)?;
        Ok(Self { stage1, stage2, pos, image_size: cfg.image_size, patch: cfg.patch_size })
    }

    pub fn check_input(&self, image: &Raster) -> Result<()> {
        if image.channels != 3 {
            return Err(Error::RejectedInput(format!("expected an RGB image, found {} channels", image.channels)));
        }
        if image.width != self.image_size || image.height != self.image_size {
            return Err(Error::RejectedInput(format!(
                "image is {}x{}, expected {}x{} (resize first)",
                image.width, image.height, self.image_size, self.image_size
            )));
        }
        if image.data.len() != image.width * image.height * 3 {
            return Err(Error::RejectedInput("raster buffer size mismatch".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch;
        (side, side)
    }

    /// Stage-1 patches as rows, pixel values mapped to `[-1, 1]`.
    fn patchify(&self, image: &Raster) -> Matrix {
        let s = self.patch / 2;
        let side = self.image_size / s;
        let mut m = Matrix::zeros(side * side, 3 * s * s);
        for pr in 0..side {
            for pc in 0..side {
                let row = m.row_mut(pr * side + pc);
                let mut k = 0;
                for dy in 0..s {
                    for dx in 0..s {
                        for ch in 0..3 {
                            row[k] = image.pixel(pc * s + dx, pr * s + dy, ch) as f64 / 127.5 - 1.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        m
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Raster) -> Result<NodeId> {
        self.check_input(image)?;
        let patches = g.constant(self.patchify(image));
        let h = self.stage1.forward(g, patches);
        let h = g.gelu(h);
        let side1 = self.image_size / (self.patch / 2);
        let side2 = side1 / 2;
        let mut parts = Vec::with_capacity(4);
        for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let idx: Vec<usize> = (0..side2 * side2)
                .map(|i| {
                    let (r, c) = (i / side2, i % side2);
                    (2 * r + oy) * side1 + 2 * c + ox
                })
                .collect();
            parts.push(g.gather_rows(h, &idx));
        }
        let merged = g.concat_cols(&parts);
        let h = self.stage2.forward(g, merged);
        let pos = g.param(self.pos);
        let h = g.add(h, pos);
        Ok(g.layer_norm(h, LN_EPS))
    }
}

/// Text-to-image and image-to-text cross-attention, independent weights.
pub(crate) struct BiFusion {
    t2i: Attention,
    i2t: Attention,
}

impl BiFusion {
    pub fn new(b: &mut Builder<'_>, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            t2i: Attention::new(b, "fusion.t2i", cfg.d_model, cfg.heads)?,
            i2t: Attention::new(b, "fusion.i2t", cfg.d_model, cfg.heads)?,
        })
    }

    /// Returns `(H_T0, I_B)`.
    pub fn forward(&self, g: &mut Graph<'_>, h_t: NodeId, i_e: NodeId, text_mask: &[bool]) -> (NodeId, NodeId) {
        let h_t0 = self.t2i.forward(g, h_t, i_e, None, false);
        let i_b = self.i2t.forward(g, i_e, h_t, Some(text_mask), false);
        (h_t0, i_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_softmax_example() {
        let q = Matrix::from_rows(&[[1.0]]);
        let k = Matrix::from_rows(&[[1.0], [1.0]]);
        let v = Matrix::from_rows(&[[2.0], [4.0]]);
        let (out, p) = attend(&q, &k, &v).unwrap();
        assert!((out.item() - 3.0).abs() < 1e-12);
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn signed_zero_scores_tie() {
        assert_eq!(top_k_indices(&[0.0, -0.0, 0.0], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn single_key_returns_value() {
        let w = AttentionWeights::identity(2);
        let kv = Matrix::from_rows(&[[0.3, -0.7]]);
        for q in [[5.0, 1.0], [-3.0, 0.2]] {
            let out = cross_attention(&Matrix::from_rows(&[q]), &kv, &w).unwrap();
            assert!(out.max_abs_diff(&kv) < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let w = AttentionWeights::identity(3);
        let r = cross_attention(&Matrix::zeros(2, 2), &Matrix::zeros(4, 3), &w);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn selection_example() {
        let s = [2.0, 3.0];
        assert_eq!(top_k_indices(&s, 1).unwrap(), [1]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 2.0], 3).unwrap(), [2, 0, 1]);
        assert!(top_k_indices(&s, 0).is_err());
        assert!(top_k_indices(&s, 3).is_err());
    }

    #[test]
    fn relevance_respects_mask() {
        // S = I_B H^T = [[1,2,0],[3,1,1]] with H = I_3 and I_B = S
        let i_b = Matrix::from_rows(&[[1.0, 2.0, 0.0], [3.0, 1.0, 1.0]]);
        let h = Matrix::identity(3);
        assert_eq!(relevance_scores(&i_b, &h, &[true; 3]).unwrap(), [2.0, 3.0]);
        assert_eq!(relevance_scores(&i_b, &h, &[false, true, true]).unwrap(), [2.0, 1.0]);
        assert!(relevance_scores(&i_b, &h, &[false; 3]).is_err());
    }
}
