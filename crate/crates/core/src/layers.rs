//! Parameterised building blocks recorded on a [`Graph`].

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, SoftmaxMask};
use crate::error::Result;
use crate::params::{glorot, ModuleTag, ParamId, ParamStore};
use crate::tensor::Matrix;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Inserts parameters under a common name prefix.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub module: ModuleTag,
    pub trainable: bool,
}

impl Builder<'_> {
    pub fn add(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        self.store.insert(name, value, self.module, self.trainable)
    }

    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let w = glorot(self.rng, fan_in, fan_out);
        self.add(name, w)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Matrix::filled(rows, cols, 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = b.weight(&format!("{name}.w"), fan_in, fan_out)?;
        let bias = if bias { Some(b.zeros(&format!("{name}.b"), 1, fan_out)?) } else { None };
        Ok(Self { w, b: bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize) -> Result<Self> {
        Ok(Self { gain: b.ones(&format!("{name}.g"), 1, d)?, bias: b.zeros(&format!("{name}.b"), 1, d)? })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(b, &format!("{name}.up"), d, hidden, true)?,
            down: Linear::new(b, &format!("{name}.down"), hidden, d, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head attention: per-head scaled dot-product attention over
/// `Q = XW_Q + b_Q`, `K = YW_K + b_K`, `V = YW_V + b_V`, heads concatenated and
/// mapped by a bias-free output projection.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: b.weight(&format!("{name}.wq"), d, d)?,
            bq: b.zeros(&format!("{name}.bq"), 1, d)?,
            wk: b.weight(&format!("{name}.wk"), d, d)?,
            bk: b.zeros(&format!("{name}.bk"), 1, d)?,
            wv: b.weight(&format!("{name}.wv"), d, d)?,
            bv: b.zeros(&format!("{name}.bv"), 1, d)?,
            wo: b.weight(&format!("{name}.wo"), d, d)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: NodeId,
        kv: NodeId,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> NodeId {
        let proj = |g: &mut Graph<'_>, x: NodeId, w: ParamId, b: ParamId| {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };
        let q = proj(g, query, self.wq, self.bq);
        let k = proj(g, kv, self.wk, self.bk);
        let v = proj(g, kv, self.wv, self.bv);
        let d = g.shape(q).1;
        let dk = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dk, dk), g.slice_cols(k, h * dk, dk), g.slice_cols(v, h * dk, dk))
            };
            outs.push(scaled_dot_product(g, qh, kh, vh, dk, SoftmaxMask { keys: key_mask, causal }));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let wo = g.param(self.wo);
        g.matmul(cat, wo)
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` on already-projected inputs.
pub(crate) fn scaled_dot_product(
    g: &mut Graph<'_>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    dk: usize,
    mask: SoftmaxMask<'_>,
) -> NodeId {
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / libm::sqrt(dk as f64));
    let p = g.softmax_rows(scores, mask);
    g.matmul(p, v)
}

/// Pre-norm residual sub-block: `x + f(LN(x))`.
pub(crate) fn residual<F>(g: &mut Graph<'_>, x: NodeId, ln: &LayerNorm, f: F) -> NodeId
where
    F: FnOnce(&mut Graph<'_>, NodeId) -> NodeId,
{
    let n = ln.forward(g, x);
    let y = f(g, n);
    g.add(x, y)
}
