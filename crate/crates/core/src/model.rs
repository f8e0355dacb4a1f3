//! The full model: encoders, fusion, query selection and both decoders.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::boxes::BoundingBox;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    relevance_scores, top_k_indices, BiFusion, FusedFeatures, ImageEncoder, ImageFeatures, SelectedQueries,
    TextEncoder, TextFeatures,
};
use crate::image_decoder::{candidates, image_loss_nodes, BoxHeads, ImageDecoder, ImageDecoderState, LossBreakdown};
use crate::layers::Builder;
use crate::matching::{match_predictions, Assignment, LossWeights};
use crate::params::{ModuleTag, ParamStore};
use crate::rationale::{pack_input, AugmentedText, Phase, RationaleSet};
use crate::sample::{Raster, Sample};
use crate::tensor::Matrix;
use crate::text_decoder::{teacher_forcing, DecoderState, Prediction, TextDecoder};
use crate::textnorm::join_targets;
use crate::tokenizer::{ByteTokenizer, TokenId};

pub struct CofiPara {
    pub config: TrainConfig,
    pub params: ParamStore,
    text_encoder: TextEncoder,
    image_encoder: ImageEncoder,
    fusion: BiFusion,
    text_decoder: TextDecoder,
    image_decoder: ImageDecoder,
    heads: BoxHeads,
    tokenizer: ByteTokenizer,
}

/// Graph nodes produced by encoding, fusion and query selection.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h_t: NodeId,
    pub i_e: NodeId,
    pub h_t0: NodeId,
    pub i_b: NodeId,
    pub i_q: NodeId,
    pub query_indices: Vec<usize>,
    pub text_mask: Vec<bool>,
    pub token_ids: Vec<TokenId>,
    pub truncated_from: Option<usize>,
}

/// A training instance after rationale packing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub input: AugmentedText,
    pub image: Raster,
    /// Label word (pre-training) or delimiter-joined textual targets.
    pub target_text: String,
    pub boxes: Vec<BoundingBox>,
}

impl TrainExample {
    pub fn new(sample: &Sample, rationales: &RationaleSet, phase: Phase) -> Result<Self> {
        let input = pack_input(sample, rationales, phase)?;
        let target_text = match phase {
            Phase::Pretrain => sample
                .msd_label
                .ok_or_else(|| Error::Validation {
                    record_id: sample.id.clone(),
                    field: "msd_label",
                    message: "pre-training needs a label".into(),
                })?
                .as_str()
                .into(),
            Phase::Finetune => {
                if !sample.has_targets() {
                    return Err(Error::Validation {
                        record_id: sample.id.clone(),
                        field: "textual_targets",
                        message: "fine-tuning needs textual and/or visual targets".into(),
                    });
                }
                join_targets(&sample.textual_targets)
            }
        };
        Ok(Self {
            id: sample.id.clone(),
            input,
            image: sample.image.clone(),
            target_text,
            boxes: if phase == Phase::Finetune { sample.visual_targets.clone() } else { Vec::new() },
        })
    }
}

/// Loss nodes and bookkeeping for one example.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub text: NodeId,
    pub l1: Option<NodeId>,
    pub giou: Option<NodeId>,
    pub cls: Option<NodeId>,
    pub img: Option<NodeId>,
    pub total: NodeId,
    pub assignment: Option<Assignment>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph<'_>, w: LossWeights) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).item();
        match (self.l1, self.giou, self.cls, self.img) {
            (Some(l1), Some(giou), Some(cls), Some(img)) => LossBreakdown {
                l_text: v(self.text),
                l_l1: v(l1),
                l_giou: v(giou),
                l_cls: v(cls),
                l_img: v(img),
                total: v(self.total),
                alpha: w.alpha,
                beta: w.beta,
                gamma: w.gamma,
            },
            _ => LossBreakdown::text_only(v(self.text), w),
        }
    }
}

impl CofiPara {
    /// Fresh model. Each module draws from its own seeded stream, so a module's
    /// initial values do not depend on the sizes of the others.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let rng_for = |tag: ModuleTag| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(tag as u64);
            r
        };
        macro_rules! build {
            ($tag:expr, $trainable:expr, $ctor:path) => {{
                let mut rng = rng_for($tag);
                let mut b = Builder { store: &mut params, rng: &mut rng, module: $tag, trainable: $trainable };
                $ctor(&mut b, &config)?
            }};
        }
        let text_encoder = build!(ModuleTag::TextEncoder, true, TextEncoder::new);
        let image_encoder = build!(ModuleTag::ImageEncoder, false, ImageEncoder::new);
        let fusion = build!(ModuleTag::Fusion, true, BiFusion::new);
        let text_decoder = build!(ModuleTag::TextDecoder, true, TextDecoder::new);
        let image_decoder = build!(ModuleTag::ImageDecoder, true, ImageDecoder::new);
        let heads = build!(ModuleTag::Heads, true, BoxHeads::new);
        Ok(Self {
            config,
            params,
            text_encoder,
            image_encoder,
            fusion,
            text_decoder,
            image_decoder,
            heads,
            tokenizer: ByteTokenizer,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.config.alpha, beta: self.config.beta, gamma: self.config.gamma }
    }

    pub fn tokenizer(&self) -> &ByteTokenizer {
        &self.tokenizer
    }

    /// Token ids for the packed text, truncated to `max_text_tokens`.
    pub fn tokenize_input(&self, text: &AugmentedText) -> Result<(Vec<TokenId>, Option<usize>)> {
        let mut ids = self.tokenizer.encode(text.as_str());
        if ids.is_empty() {
            return Err(Error::RejectedInput("empty input text".into()));
        }
        let mut truncated = None;
        if ids.len() > self.config.max_text_tokens {
            log::debug!("truncating input from {} to {} tokens", ids.len(), self.config.max_text_tokens);
            truncated = Some(ids.len());
            ids.truncate(self.config.max_text_tokens);
        }
        Ok((ids, truncated))
    }

    pub fn encode(&self, g: &mut Graph<'_>, text: &AugmentedText, image: &Raster) -> Result<Encoded> {
        let (token_ids, truncated_from) = self.tokenize_input(text)?;
        let text_mask = alloc::vec![true; token_ids.len()];
        let h_t = self.text_encoder.forward(g, &token_ids, &text_mask);
        let i_e = self.image_encoder.forward(g, image)?;
        let (h_t0, i_b) = self.fusion.forward(g, h_t, i_e, &text_mask);
        let scores = relevance_scores(g.value(i_b), g.value(h_t0), &text_mask)?;
        let query_indices = top_k_indices(&scores, self.config.n_queries)?;
        let i_q = g.gather_rows(i_b, &query_indices);
        Ok(Encoded { h_t, i_e, h_t0, i_b, i_q, query_indices, text_mask, token_ids, truncated_from })
    }

    /// Teacher-forced text loss and, when fine-tuning, the detection loss.
    pub fn example_loss(&self, g: &mut Graph<'_>, ex: &TrainExample, phase: Phase) -> Result<LossNodes> {
        self.example_loss_with(g, ex, phase, None)
    }

    /// Like [`example_loss`](Self::example_loss) but with an optional fixed
    /// box assignment instead of matching on the current predictions.
    pub fn example_loss_with(
        &self,
        g: &mut Graph<'_>,
        ex: &TrainExample,
        phase: Phase,
        fixed: Option<&Assignment>,
    ) -> Result<LossNodes> {
        let enc = self.encode(g, &ex.input, &ex.image)?;
        let target = self.tokenizer.encode_target(&ex.target_text);
        let (input, target) = teacher_forcing(&target, self.config.max_target_tokens)?;
        let logits = self.text_decoder.logits(g, &input, enc.i_q);
        let text = g.cross_entropy(logits, &target);
        if phase == Phase::Pretrain {
            return Ok(LossNodes { text, l1: None, giou: None, cls: None, img: None, total: text, assignment: None });
        }
        let (boxes, conf) = self.image_head(g, &enc);
        let w = self.loss_weights();
        let assignment = match fixed {
            Some(a) => a.clone(),
            None => match_predictions(&candidates(g.value(boxes), g.value(conf)), &ex.boxes, w)?,
        };
        let nodes = image_loss_nodes(g, boxes, conf, &ex.boxes, &assignment, w);
        let total = g.add(nodes.img, text);
        Ok(LossNodes {
            text,
            l1: Some(nodes.l1),
            giou: Some(nodes.giou),
            cls: Some(nodes.cls),
            img: Some(nodes.img),
            total,
            assignment: Some(assignment),
        })
    }

    /// Detection decoder and heads on top of an encoding.
    pub fn image_head(&self, g: &mut Graph<'_>, enc: &Encoded) -> (NodeId, NodeId) {
        let x = self.image_decoder.forward(g, enc.i_q, enc.i_b, enc.h_t0, &enc.text_mask);
        self.heads.forward(g, x)
    }

    /// Full inference for one sample.
    pub fn predict(&self, sample: &Sample, rationales: &RationaleSet, phase: Phase) -> Result<Prediction> {
        let input = pack_input(sample, rationales, phase)?;
        self.predict_packed(&input, &sample.image, phase)
    }

    pub fn predict_packed(&self, input: &AugmentedText, image: &Raster, phase: Phase) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, input, image)?;
        let tokens = self.text_decoder.greedy(&mut g, enc.i_q, self.config.max_target_tokens);
        let decoded_text = self.tokenizer.decode(&tokens);
        let boxes = if phase == Phase::Finetune {
            let (b, c) = self.image_head(&mut g, &enc);
            let mut cands = candidates(g.value(b), g.value(c));
            // stable: equal confidences keep query order
            cands.sort_by(|a, b| b.1.total_cmp(&a.1));
            cands
        } else {
            Vec::new()
        };
        Ok(Prediction { tokens, decoded_text, boxes })
    }

    // Stage-wise entry points on plain matrices.

    pub fn encode_text(&self, text: &AugmentedText) -> Result<TextFeatures> {
        let (token_ids, truncated_from) = self.tokenize_input(text)?;
        let mask = alloc::vec![true; token_ids.len()];
        let mut g = Graph::new(&self.params);
        let h = self.text_encoder.forward(&mut g, &token_ids, &mask);
        Ok(TextFeatures { h_t: g.value(h).clone(), token_ids, attention_mask: mask, truncated_from })
    }

    pub fn encode_image(&self, image: &Raster) -> Result<ImageFeatures> {
        let mut g = Graph::new(&self.params);
        let i_e = self.image_encoder.forward(&mut g, image)?;
        Ok(ImageFeatures { i_e: g.value(i_e).clone(), patch_grid: self.image_encoder.grid() })
    }

    pub fn bidirectional_fuse(&self, text: &TextFeatures, image: &ImageFeatures) -> Result<FusedFeatures> {
        let d = self.config.d_model;
        if text.h_t.cols() != d || image.i_e.cols() != d {
            return Err(Error::Shape { op: "bidirectional_fuse", expected: (0, d), found: text.h_t.shape() });
        }
        if text.attention_mask.len() != text.h_t.rows() {
            return Err(Error::contract("attention mask length differs from token count"));
        }
        let mut g = Graph::new(&self.params);
        let h_t = g.constant(text.h_t.clone());
        let i_e = g.constant(image.i_e.clone());
        let (h_t0, i_b) = self.fusion.forward(&mut g, h_t, i_e, &text.attention_mask);
        Ok(FusedFeatures {
            h_t0: g.value(h_t0).clone(),
            i_b: g.value(i_b).clone(),
            text_mask: text.attention_mask.clone(),
        })
    }

    pub fn select_queries(&self, fused: &FusedFeatures) -> Result<SelectedQueries> {
        crate::fusion::select_queries(fused, self.config.n_queries)
    }

    pub fn decoder_input_state(&self, input_ids: &[TokenId]) -> Result<DecoderState> {
        if input_ids.is_empty() || input_ids.len() > self.config.max_target_tokens {
            return Err(Error::contract("decoder input length outside [1, max_target_tokens]"));
        }
        let mut g = Graph::new(&self.params);
        let h = self.text_decoder.embed(&mut g, input_ids);
        Ok(DecoderState { h: g.value(h).clone(), layer_index: 0, total_layers: self.config.text_decoder_layers })
    }

    fn check_queries(&self, queries: &Matrix) -> Result<()> {
        if queries.cols() != self.config.d_model || queries.rows() == 0 {
            return Err(Error::Shape {
                op: "selected queries",
                expected: (self.config.n_queries, self.config.d_model),
                found: queries.shape(),
            });
        }
        Ok(())
    }

    /// One augmented decoder layer: `LM_dec^i(H) + CrossAttn(H, I_Q)`.
    pub fn decode_layer(&self, state: &DecoderState, queries: &SelectedQueries) -> Result<DecoderState> {
        if state.layer_index >= state.total_layers || state.total_layers != self.text_decoder.layers.len() {
            return Err(Error::contract("decoder layer index out of range"));
        }
        if state.h.cols() != self.config.d_model {
            return Err(Error::Shape { op: "decode_layer", expected: (state.h.rows(), self.config.d_model), found: state.h.shape() });
        }
        self.check_queries(&queries.i_q)?;
        let mut g = Graph::new(&self.params);
        let h = g.constant(state.h.clone());
        let q = g.constant(queries.i_q.clone());
        let out = self.text_decoder.layers[state.layer_index].forward(&mut g, h, q);
        Ok(DecoderState { h: g.value(out).clone(), layer_index: state.layer_index + 1, total_layers: state.total_layers })
    }

    /// The plain language-model part of decoder layer `i`, without the visual term.
    pub fn lm_layer(&self, i: usize, h: &Matrix) -> Result<Matrix> {
        let layer = self.text_decoder.layers.get(i).ok_or_else(|| Error::contract("no such decoder layer"))?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(h.clone());
        let out = layer.lm_dec(&mut g, x);
        Ok(g.value(out).clone())
    }

    /// Vocabulary logits for a final decoder state.
    pub fn decoder_logits(&self, state: &DecoderState) -> Result<Matrix> {
        if state.layer_index != state.total_layers {
            return Err(Error::contract("decoder state is not final"));
        }
        let mut g = Graph::new(&self.params);
        let h = g.constant(state.h.clone());
        let out = self.text_decoder.head(&mut g, h);
        Ok(g.value(out).clone())
    }

    /// Greedy generation from selected queries.
    pub fn generate(&self, queries: &SelectedQueries, max_len: usize) -> Result<Prediction> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        self.check_queries(&queries.i_q)?;
        let mut g = Graph::new(&self.params);
        let q = g.constant(queries.i_q.clone());
        let tokens = self.text_decoder.greedy(&mut g, q, max_len);
        let decoded_text = self.tokenizer.decode(&tokens);
        Ok(Prediction { tokens, decoded_text, boxes: Vec::new() })
    }

    pub fn image_decoder_input(&self, queries: &SelectedQueries) -> ImageDecoderState {
        ImageDecoderState { i_q: queries.i_q.clone(), layer_index: 0, total_layers: self.config.image_decoder_layers }
    }

    pub fn image_decode_layer(&self, state: &ImageDecoderState, fused: &FusedFeatures) -> Result<ImageDecoderState> {
        if state.layer_index >= state.total_layers || state.total_layers != self.image_decoder.layers.len() {
            return Err(Error::contract("image decoder layer index out of range"));
        }
        let d = self.config.d_model;
        for m in [&state.i_q, &fused.i_b, &fused.h_t0] {
            if m.cols() != d {
                return Err(Error::Shape { op: "image_decode_layer", expected: (m.rows(), d), found: m.shape() });
            }
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(state.i_q.clone());
        let i_b = g.constant(fused.i_b.clone());
        let h_t0 = g.constant(fused.h_t0.clone());
        let out = self.image_decoder.layers[state.layer_index].forward(&mut g, x, i_b, h_t0, &fused.text_mask);
        Ok(ImageDecoderState { i_q: g.value(out).clone(), layer_index: state.layer_index + 1, total_layers: state.total_layers })
    }

    /// Feed-forward sub-block of image decoder layer `j`.
    pub fn image_feed_forward(&self, j: usize, x: &Matrix) -> Result<Matrix> {
        let layer = self.image_decoder.layers.get(j).ok_or_else(|| Error::contract("no such image decoder layer"))?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(x.clone());
        let out = layer.feed_forward(&mut g, x);
        Ok(g.value(out).clone())
    }

    /// Boxes and confidences from a final image decoder state, in query order.
    pub fn box_head(&self, state: &ImageDecoderState) -> Result<Vec<(BoundingBox, f64)>> {
        if state.layer_index != state.total_layers {
            return Err(Error::contract("image decoder state is not final"));
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(state.i_q.clone());
        let (b, c) = self.heads.forward(&mut g, x);
        Ok(candidates(g.value(b), g.value(c)))
    }
}
