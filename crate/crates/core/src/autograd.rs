//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation applied during a forward pass. Parameter
//! leaves are tied to a [`ParamStore`] slot, and [`Graph::backward`] returns the
//! gradient of a scalar node with respect to every trainable parameter that took
//! part in the computation. Frozen parameters and constants never receive a
//! gradient.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Max(NodeId, NodeId),
    Min(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Softmax(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Log(NodeId),
    Abs(NodeId),
    LayerNorm { input: NodeId, rstd: Vec<f64> },
    Gather { input: NodeId, indices: Vec<usize> },
    SliceCols { input: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Masking applied to the columns of a row-wise softmax.
#[derive(Clone, Copy, Debug, Default)]
pub struct SoftmaxMask<'a> {
    /// Columns with `false` receive zero probability.
    pub keys: Option<&'a [bool]>,
    /// Row `i` may only attend to columns `0..=i`.
    pub causal: bool,
}

/// Gradients of a scalar with respect to trainable parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let slot = self.grads.entry(id).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (a, b) in slot.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += scale * b;
            }
        }
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: BTreeMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = self.params.get(id);
        let n = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Matrix::zeros(m, n);
        matmul_into(self.value(a).as_slice(), self.value(b).as_slice(), out.as_mut_slice(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul_t(self.value(b)).expect("matmul_t inner dimension");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, f64::max, Op::Max(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, f64::min, Op::Min(a, b))
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(bias);
        assert_eq!((1, va.cols()), vb.shape(), "add_row bias shape");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row vector.
    pub fn mul_row(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let va = self.value(a);
        let vg = self.value(gain);
        assert_eq!((1, va.cols()), vg.shape(), "mul_row gain shape");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(vg.as_slice()) {
                *o *= g;
            }
        }
        let rg = self.rg(a) || self.rg(gain);
        self.push(out, Op::MulRow(a, gain), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Row-wise softmax with optional key and causal masking.
    pub fn softmax_rows(&mut self, a: NodeId, mask: SoftmaxMask<'_>) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        if let Some(keys) = mask.keys {
            assert_eq!(keys.len(), cols, "softmax key mask length");
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let allowed = |c: usize| {
                mask.keys.is_none_or(|k| k[c]) && (!mask.causal || c <= r)
            };
            let src = va.row(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in src.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                // fully masked row: leave zeros
                continue;
            }
            let dst = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = libm::exp(src[c] - max);
                    dst[c] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + libm::tanh(gelu_inner(x))));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(libm::log);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(libm::fabs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = va.row(r);
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / libm::sqrt(var + eps);
            for (o, v) in out.row_mut(r).iter_mut().zip(src) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { input: a, rstd }, rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let out = self.value(a).gather_rows(indices);
        let rg = self.rg(a);
        self.push(out, Op::Gather { input: a, indices: indices.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { input: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).as_slice().iter().sum();
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Matrix::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let v = self.value(logits);
        assert_eq!(v.rows(), targets.len(), "one target per logits row");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= log_softmax_at(v.row(r), t);
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(logits);
        self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec() }, rg)
    }

    /// Gradients of the scalar node `root` with respect to trainable parameters.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (&pid, &nid) in &self.param_nodes {
            if !self.nodes[nid.0].requires_grad {
                continue;
            }
            let g = grads[nid.0].take().unwrap_or_else(|| {
                let (r, c) = self.shape(nid);
                Matrix::zeros(r, c)
            });
            out.grads.insert(pid, g);
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = g.matmul_t(vb).unwrap();
                    acc(grads, *a, da.as_slice(), va.shape());
                }
                if self.rg(*b) {
                    let (m, k) = va.shape();
                    let n = vb.cols();
                    let at = va.transpose();
                    let mut db = Matrix::zeros(k, n);
                    matmul_into(at.as_slice(), g.as_slice(), db.as_mut_slice(), k, m, n);
                    acc(grads, *b, db.as_slice(), vb.shape());
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = g.matmul(vb).unwrap();
                    acc(grads, *a, da.as_slice(), va.shape());
                }
                if self.rg(*b) {
                    let db = g.transpose().matmul(va).unwrap();
                    acc(grads, *b, db.as_slice(), vb.shape());
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, g.as_slice());
                self.acc_if(grads, *b, g.as_slice());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, g.as_slice());
                if self.rg(*b) {
                    let neg: Vec<f64> = g.as_slice().iter().map(|v| -v).collect();
                    acc(grads, *b, &neg, g.shape());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d: Vec<f64> = g.as_slice().iter().zip(vb.as_slice()).map(|(g, b)| g * b).collect();
                    acc(grads, *a, &d, g.shape());
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g.as_slice().iter().zip(va.as_slice()).map(|(g, a)| g * a).collect();
                    acc(grads, *b, &d, g.shape());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d: Vec<f64> = g.as_slice().iter().zip(vb.as_slice()).map(|(g, b)| g / b).collect();
                    acc(grads, *a, &d, g.shape());
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g
                        .as_slice()
                        .iter()
                        .zip(va.as_slice().iter().zip(vb.as_slice()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    acc(grads, *b, &d, g.shape());
                }
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = va
                    .as_slice()
                    .iter()
                    .zip(vb.as_slice())
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if self.rg(*a) {
                    let d: Vec<f64> =
                        g.as_slice().iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
                    acc(grads, *a, &d, g.shape());
                }
                if self.rg(*b) {
                    let d: Vec<f64> =
                        g.as_slice().iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect();
                    acc(grads, *b, &d, g.shape());
                }
            }
            Op::AddRow(a, bias) => {
                self.acc_if(grads, *a, g.as_slice());
                if self.rg(*bias) {
                    acc(grads, *bias, &col_sums(g), (1, g.cols()));
                }
            }
            Op::MulRow(a, gain) => {
                let (va, vg) = (self.value(*a), self.value(*gain));
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (x, gv) in d.row_mut(r).iter_mut().zip(vg.as_slice()) {
                            *x *= gv;
                        }
                    }
                    acc(grads, *a, d.as_slice(), g.shape());
                }
                if self.rg(*gain) {
                    let mut d = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for ((acc, gv), av) in d.iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *acc += gv * av;
                        }
                    }
                    acc(grads, *gain, &d, (1, g.cols()));
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let d: Vec<f64> = g.as_slice().iter().map(|v| v * s).collect();
                    acc(grads, *a, &d, g.shape());
                }
            }
            Op::AddScalar(a) => self.acc_if(grads, *a, g.as_slice()),
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(grads, *a, d.as_slice(), d.shape());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = g.as_slice().iter().zip(x.as_slice()).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc(grads, *a, &d, g.shape());
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g.as_slice().iter().zip(y.as_slice()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *a, &d, g.shape());
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = g.as_slice().iter().zip(x.as_slice()).map(|(g, &x)| g * sigmoid(-x)).collect();
                acc(grads, *a, &d, g.shape());
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = g.as_slice().iter().zip(x.as_slice()).map(|(g, x)| g / x).collect();
                acc(grads, *a, &d, g.shape());
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = g
                    .as_slice()
                    .iter()
                    .zip(x.as_slice())
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                acc(grads, *a, &d, g.shape());
            }
            Op::LayerNorm { input, rstd } => {
                let cols = y.cols() as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = dot(gr, yr) / cols;
                    for (o, (gv, yv)) in d.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = rstd[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(grads, *input, d.as_slice(), d.shape());
            }
            Op::Gather { input, indices } => {
                let shape = self.shape(*input);
                let mut d = Matrix::zeros(shape.0, shape.1);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(grads, *input, d.as_slice(), shape);
            }
            Op::SliceCols { input, start } => {
                let shape = self.shape(*input);
                let mut d = Matrix::zeros(shape.0, shape.1);
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *input, d.as_slice(), shape);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    if self.rg(p) {
                        let mut d = Matrix::zeros(shape.0, shape.1);
                        for r in 0..shape.0 {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + shape.1]);
                        }
                        acc(grads, p, d.as_slice(), shape);
                    }
                    offset += shape.1;
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                let d = vec![g.item(); shape.0 * shape.1];
                acc(grads, *a, &d, shape);
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                let d = vec![g.item() / n; shape.0 * shape.1];
                acc(grads, *a, &d, shape);
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.value(*logits);
                let scale = g.item() / targets.len() as f64;
                let mut d = Matrix::zeros(v.rows(), v.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = v.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|x| libm::exp(x - max)).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        let p = libm::exp(row[c] - max) / total;
                        *o = scale * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *logits, d.as_slice(), d.shape());
            }
        }
    }

    fn acc_if(&self, grads: &mut [Option<Matrix>], id: NodeId, d: &[f64]) {
        if self.rg(id) {
            acc(grads, id, d, self.shape(id));
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], id: NodeId, d: &[f64], shape: (usize, usize)) {
    match &mut grads[id.0] {
        Some(m) => {
            for (a, b) in m.as_mut_slice().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Matrix::from_vec(shape.0, shape.1, d.to_vec()).unwrap()),
    }
}

fn col_sums(g: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu_inner(x: f64) -> f64 {
    SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(gelu_inner(x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

/// `log softmax(row)[target]`.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|x| libm::exp(x - max)).sum();
    row[target] - max - libm::log(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModuleTag, ParamStore};

    /// Central finite differences of `f` around the parameter `id`.
    fn fd_check(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64, analytic: &Matrix) {
        let h = 1e-6;
        for i in 0..analytic.len() {
            let orig = store.get(id).value.as_slice()[i];
            store.get_mut(id).value.as_mut_slice()[i] = orig + h;
            let up = f(store);
            store.get_mut(id).value.as_mut_slice()[i] = orig - h;
            let down = f(store);
            store.get_mut(id).value.as_mut_slice()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let scale = a.abs().max(num.abs());
            assert!((a - num).abs() <= 1e-5 * scale + 1e-9, "elem {i}: analytic {a} vs numeric {num}");
        }
    }

    fn check_all(store: &mut ParamStore, f: &dyn Fn(&ParamStore, &mut Graph) -> NodeId) {
        let grads = {
            let mut g = Graph::new(store);
            let root = f(store, &mut g);
            g.backward(root)
        };
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(an) = grads.get(id) {
                let an = an.clone();
                let eval = |s: &ParamStore| {
                    let mut g = Graph::new(s);
                    let r = f(s, &mut g);
                    g.value(r).item()
                };
                fd_check(store, id, &eval, &an);
            }
        }
    }

    fn store_with(mats: &[(&str, Matrix)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::default();
        let ids = mats.iter().map(|(n, m)| s.insert(n, m.clone(), ModuleTag::Fusion, true).unwrap()).collect();
        (s, ids)
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let a = Matrix::from_rows(&[[0.3, -1.2, 0.7], [0.9, 0.1, -0.4]]);
        let b = Matrix::from_rows(&[[0.5, 0.2], [-0.3, 0.8], [1.1, -0.6]]);
        let c = Matrix::from_rows(&[[0.2, 0.4, 1.5], [0.6, 1.3, 0.8]]);
        let (mut s, ids) = store_with(&[("a", a), ("b", b), ("c", c)]);
        let (ia, ib, ic) = (ids[0], ids[1], ids[2]);
        check_all(&mut s, &|_, g| {
            let a = g.param(ia);
            let b = g.param(ib);
            let c = g.param(ic);
            let ab = g.matmul(a, b);
            let act = g.gelu(ab);
            let sm = g.softmax_rows(act, SoftmaxMask::default());
            let ac = g.matmul_t(a, c);
            let mx = g.max(sm, ac);
            let mn = g.min(ac, sm);
            let cs = c_slice(g, c);
            let d = g.div(mx, cs);
            let p = g.mul(d, mn);
            let ln = g.layer_norm(p, 1e-5);
            let sg = g.sigmoid(ln);
            let lg = g.log(sg);
            let ab2 = g.abs(lg);
            let ls = g.log_sigmoid(ab2);
            g.mean(ls)
        });
    }

    fn c_slice(g: &mut Graph, c: NodeId) -> NodeId {
        let s = g.slice_cols(c, 1, 2);
        g.add_scalar(s, 2.0)
    }

    #[test]
    fn broadcast_gather_concat_ce_grads() {
        let a = Matrix::from_rows(&[[0.3, -1.2, 0.7], [0.9, 0.1, -0.4], [0.2, 0.5, 0.6]]);
        let bias = Matrix::from_rows(&[[0.1, -0.2, 0.3]]);
        let gain = Matrix::from_rows(&[[1.1, 0.9, -0.5]]);
        let (mut s, ids) = store_with(&[("a", a), ("bias", bias), ("gain", gain)]);
        let (ia, ib, ig) = (ids[0], ids[1], ids[2]);
        let keys = [true, false, true];
        check_all(&mut s, &|_, g| {
            let a = g.param(ia);
            let b = g.param(ib);
            let gn = g.param(ig);
            let x = g.add_row(a, b);
            let x = g.mul_row(x, gn);
            let rows = g.gather_rows(x, &[2, 0, 2]);
            let left = g.slice_cols(rows, 0, 1);
            let right = g.slice_cols(rows, 1, 2);
            let cat = g.concat_cols(&[right, left]);
            let sm = g.softmax_rows(cat, SoftmaxMask { keys: Some(&keys), causal: true });
            let sc = g.scale(sm, 3.0);
            let both = g.add(sc, cat);
            let ce = g.cross_entropy(both, &[1, 0, 2]);
            let sub = g.sub(both, cat);
            let s2 = g.sum(sub);
            let t = g.add(ce, s2);
            g.mean(t)
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = ParamStore::default();
        let w = s.insert("w", Matrix::filled(2, 2, 0.5), ModuleTag::ImageEncoder, false).unwrap();
        let v = s.insert("v", Matrix::filled(2, 2, 0.5), ModuleTag::Fusion, true).unwrap();
        let mut g = Graph::new(&s);
        let a = g.param(w);
        let b = g.param(v);
        let c = g.matmul(a, b);
        let r = g.sum(c);
        let grads = g.backward(r);
        assert!(grads.get(w).is_none());
        assert!(grads.get(v).is_some());
    }

    #[test]
    fn masked_softmax_rows_are_stochastic() {
        let s = ParamStore::default();
        let mut g = Graph::new(&s);
        let x = g.constant(Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]]));
        let keys = [true, true, false];
        let y = g.softmax_rows(x, SoftmaxMask { keys: Some(&keys), causal: false });
        for r in 0..2 {
            let row = g.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[2], 0.0);
        }
    }
}
