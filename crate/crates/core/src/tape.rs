//! Operation tape: an ordered record of a forward pass that supports exact
//! reverse-mode gradients and, in [`crate::relevance`], a backward relevance
//! pass over the same graph.
//!
//! Attention blocks are numbered from the output side: the last block the
//! forward pass executes is block 1, the first is block `B`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Embed,
    Linear,
    MatMul,
    Add,
    Softmax,
    Gelu,
    LayerNorm,
    Scale,
    SplitHeads,
    MergeHeads,
    TransposeLast,
    SelectCls,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedKind {
    /// Inputs: `[image H×W, patch weight p²×d, patch bias d, cls 1×d, pos s×d]`.
    Patches { patch: usize },
    /// Inputs: `[token ids n, table V×d, pos S×d]`; id 0 (CLS) is prepended.
    Tokens,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(String),
    Embed(EmbedKind),
    /// Inputs: `[x, w]` or `[x, w, bias]`.
    Linear,
    MatMul,
    Add,
    Softmax,
    Gelu,
    /// Inputs: `[x, gamma, beta]`.
    LayerNorm { eps: f64 },
    Scale(f64),
    SplitHeads(usize),
    MergeHeads,
    TransposeLast,
    SelectCls,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Embed(_) => OpKind::Embed,
            Op::Linear => OpKind::Linear,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Softmax => OpKind::Softmax,
            Op::Gelu => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Scale(_) => OpKind::Scale,
            Op::SplitHeads(_) => OpKind::SplitHeads,
            Op::MergeHeads => OpKind::MergeHeads,
            Op::TransposeLast => OpKind::TransposeLast,
            Op::SelectCls => OpKind::SelectCls,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param(_))
    }
}

#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub output: Tensor,
    pub block: Option<usize>,
    pub is_attention_map: bool,
}

impl LayerRecord {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    records: Vec<LayerRecord>,
    num_blocks: usize,
    input: Option<NodeId>,
    embedding: Option<NodeId>,
    output: Option<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn record(&self, id: NodeId) -> &LayerRecord {
        &self.records[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.records[id.0].output
    }

    pub fn saved_inputs(&self, id: NodeId) -> Vec<&Tensor> {
        self.records[id.0]
            .inputs
            .iter()
            .map(|&i| self.value(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn input_id(&self) -> Option<NodeId> {
        self.input
    }

    /// The embedding output, i.e. the deepest layer relevance is carried to.
    pub fn embedding_id(&self) -> Option<NodeId> {
        self.embedding
    }

    pub fn output_id(&self) -> Option<NodeId> {
        self.output
    }

    /// Output logits flattened to a vector.
    pub fn output_logits(&self) -> Result<Tensor> {
        let id = self
            .output
            .ok_or_else(|| Error::InvalidArgument("tape has no output".into()))?;
        let v = self.value(id);
        v.reshape(&[v.len()])
    }

    /// The softmax record of attention block `b` (1-based, output side first).
    pub fn attention_id(&self, block: usize) -> Option<NodeId> {
        self.records
            .iter()
            .position(|r| r.is_attention_map && r.block == Some(block))
            .map(NodeId)
    }

    pub fn attention_map(&self, block: usize) -> Option<&Tensor> {
        self.attention_id(block).map(|id| self.value(id))
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.records
            .iter()
            .position(|r| matches!(&r.op, Op::Param(n) if n == name))
            .map(NodeId)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, output: Tensor) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.records.len()));
        self.records.push(LayerRecord {
            op,
            inputs,
            output,
            block: None,
            is_attention_map: false,
        });
        NodeId(self.records.len() - 1)
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = forward(&op, &values).map_err(|e| e.at_layer(self.records.len()))?;
        Ok(self.push(op, inputs, out))
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Input, Vec::new(), value);
        self.input = Some(id);
        id
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Param(name.into()), Vec::new(), value)
    }

    pub fn embed(&mut self, kind: EmbedKind, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.apply(Op::Embed(kind), inputs)?;
        self.embedding = Some(id);
        Ok(id)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.apply(Op::Linear, inputs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, vec![a, b])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, vec![x])
    }

    /// Softmax that produces the attention map of block `block`.
    pub fn attention_softmax(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        let id = self.apply(Op::Softmax, vec![x])?;
        let rec = &mut self.records[id.0];
        rec.block = Some(block);
        rec.is_attention_map = true;
        self.num_blocks += 1;
        Ok(id)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Gelu, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale(factor), vec![x])
    }

    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        self.apply(Op::SplitHeads(heads), vec![x])
    }

    pub fn merge_heads(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MergeHeads, vec![x])
    }

    pub fn transpose_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::TransposeLast, vec![x])
    }

    pub fn select_cls(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SelectCls, vec![x])
    }

    /// Tags the records created since `from` with block index `block`.
    pub(crate) fn tag_block(&mut self, from: usize, block: usize) {
        for rec in &mut self.records[from..] {
            if rec.block.is_none() {
                rec.block = Some(block);
            }
        }
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// Recomputes every record from the leaves and returns the output value.
    pub fn replay(&self) -> Result<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.records.len());
        for (n, rec) in self.records.iter().enumerate() {
            let v = if rec.op.is_leaf() {
                rec.output.clone()
            } else {
                let ins: Vec<&Tensor> = rec.inputs.iter().map(|i| &values[i.0]).collect();
                forward(&rec.op, &ins).map_err(|e| e.at_layer(n))?
            };
            values.push(v);
        }
        let id = self
            .output
            .ok_or_else(|| Error::InvalidArgument("tape has no output".into()))?;
        let v = &values[id.0];
        v.reshape(&[v.len()])
    }
}

fn expect_inputs(op: &Op, inputs: &[&Tensor], n: &[usize]) -> Result<()> {
    if n.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{:?} takes {:?} inputs, got {}",
            op.kind(),
            n,
            inputs.len()
        )))
    }
}

pub(crate) fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    if x.rank() != 2 || !x.shape()[1].is_multiple_of(heads) {
        return Err(Error::shape("split_heads", x.shape(), &[heads]));
    }
    let (s, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let mut out = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            for c in 0..dh {
                out[(h * s + i) * dh + c] = x.data()[i * d + h * dh + c];
            }
        }
    }
    Tensor::new(vec![heads, s, dh], out)
}

pub(crate) fn merge_heads(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("merge_heads", x.shape(), &[]));
    }
    let (heads, s, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = heads * dh;
    let mut out = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            for c in 0..dh {
                out[i * d + h * dh + c] = x.data()[(h * s + i) * dh + c];
            }
        }
    }
    Tensor::new(vec![s, d], out)
}

pub(crate) fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 2 || !image.shape()[0].is_multiple_of(patch) || !image.shape()[1].is_multiple_of(patch) {
        return Err(Error::InputMismatch(format!(
            "image {:?} is not divisible into {patch}×{patch} patches",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (gh, gw) = (h / patch, w / patch);
    let pp = patch * patch;
    let mut out = vec![0.0; gh * gw * pp];
    for gy in 0..gh {
        for gx in 0..gw {
            let p = gy * gw + gx;
            for dy in 0..patch {
                for dx in 0..patch {
                    out[p * pp + dy * patch + dx] = image.data()[(gy * patch + dy) * w + gx * patch + dx];
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pp], out)
}

fn unpatchify(patches: &Tensor, patch: usize, h: usize, w: usize) -> Tensor {
    let gw = w / patch;
    let pp = patch * patch;
    let mut out = Tensor::zeros(&[h, w]);
    for p in 0..patches.rows() {
        let (gy, gx) = (p / gw, p % gw);
        for dy in 0..patch {
            for dx in 0..patch {
                out.data_mut()[(gy * patch + dy) * w + gx * patch + dx] = patches.data()[p * pp + dy * patch + dx];
            }
        }
    }
    out
}

fn token_ids(ids: &Tensor, vocab: usize) -> Result<Vec<usize>> {
    ids.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < vocab {
                Ok(v as usize)
            } else {
                Err(Error::InputMismatch(format!("token id {v} outside vocabulary of {vocab}")))
            }
        })
        .collect()
}

fn embed_forward(kind: &EmbedKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        EmbedKind::Patches { patch } => {
            let [image, w, b, cls, pos] = inputs else {
                return Err(Error::InvalidArgument("patch embedding takes 5 inputs".into()));
            };
            let patches = patchify(image, *patch)?;
            let proj = tensor::linear(&patches, w, Some(b))?;
            let d = w.shape()[1];
            let s = proj.rows() + 1;
            if pos.rows() != s || pos.last_dim() != d || cls.len() != d {
                return Err(Error::InputMismatch(format!(
                    "sequence of {s} tokens does not fit positional table {:?}",
                    pos.shape()
                )));
            }
            let mut out = Tensor::zeros(&[s, d]);
            for j in 0..d {
                out.data_mut()[j] = cls.data()[j] + pos.data()[j];
            }
            for r in 1..s {
                for j in 0..d {
                    out.data_mut()[r * d + j] = proj.data()[(r - 1) * d + j] + pos.data()[r * d + j];
                }
            }
            Ok(out)
        }
        EmbedKind::Tokens => {
            let [ids, table, pos] = inputs else {
                return Err(Error::InvalidArgument("token embedding takes 3 inputs".into()));
            };
            let ids = token_ids(ids, table.rows())?;
            let d = table.last_dim();
            let s = ids.len() + 1;
            if pos.rows() < s || pos.last_dim() != d {
                return Err(Error::InputMismatch(format!(
                    "{} tokens plus CLS exceed positional table {:?}",
                    ids.len(),
                    pos.shape()
                )));
            }
            let mut out = Tensor::zeros(&[s, d]);
            for r in 0..s {
                let id = if r == 0 { 0 } else { ids[r - 1] };
                for j in 0..d {
                    out.data_mut()[r * d + j] = table.data()[id * d + j] + pos.data()[r * d + j];
                }
            }
            Ok(out)
        }
    }
}

/// Forward value of `op` applied to `inputs`.
pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Input | Op::Param(_) => Err(Error::InvalidArgument("leaf records have no forward".into())),
        Op::Embed(kind) => embed_forward(kind, inputs),
        Op::Linear => {
            expect_inputs(op, inputs, &[2, 3])?;
            tensor::linear(inputs[0], inputs[1], inputs.get(2).copied())
        }
        Op::MatMul => {
            expect_inputs(op, inputs, &[2])?;
            tensor::matmul(inputs[0], inputs[1])
        }
        Op::Add => {
            expect_inputs(op, inputs, &[2])?;
            tensor::add(inputs[0], inputs[1])
        }
        Op::Softmax => {
            expect_inputs(op, inputs, &[1])?;
            Ok(tensor::softmax_lastdim(inputs[0]))
        }
        Op::Gelu => {
            expect_inputs(op, inputs, &[1])?;
            Ok(tensor::gelu(inputs[0]))
        }
        Op::LayerNorm { eps } => {
            expect_inputs(op, inputs, &[3])?;
            tensor::layer_norm(inputs[0], inputs[1], inputs[2], *eps)
        }
        Op::Scale(c) => {
            expect_inputs(op, inputs, &[1])?;
            Ok(inputs[0].scale(*c))
        }
        Op::SplitHeads(h) => {
            expect_inputs(op, inputs, &[1])?;
            split_heads(inputs[0], *h)
        }
        Op::MergeHeads => {
            expect_inputs(op, inputs, &[1])?;
            merge_heads(inputs[0])
        }
        Op::TransposeLast => {
            expect_inputs(op, inputs, &[1])?;
            if inputs[0].rank() < 2 {
                return Err(Error::shape("transpose_last", inputs[0].shape(), &[]));
            }
            Ok(inputs[0].transpose_last())
        }
        Op::SelectCls => {
            expect_inputs(op, inputs, &[1])?;
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(Error::shape("select_cls", x.shape(), &[]));
            }
            Tensor::new(vec![1, x.last_dim()], x.row(0).to_vec())
        }
    }
}

/// Vector-Jacobian product: gradients of the inputs of `op` given the
/// gradient `grad` of its output. Inputs without a meaningful gradient
/// (token ids) yield `None`.
pub fn vjp(op: &Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let out = match op {
        Op::Input | Op::Param(_) => Vec::new(),
        Op::Embed(kind) => embed_vjp(kind, inputs, grad)?,
        Op::Linear => {
            let (x, w) = (inputs[0], inputs[1]);
            let gx = tensor::matmul(grad, &w.transpose_last())?;
            let gw = tensor::matmul(&x.transpose_last(), grad)?;
            let mut v = vec![Some(gx), Some(gw)];
            if inputs.len() == 3 {
                v.push(Some(grad.sum_rows()));
            }
            v
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = tensor::matmul(grad, &b.transpose_last())?;
            let gb = tensor::matmul(&a.transpose_last(), grad)?;
            vec![Some(ga), Some(gb)]
        }
        Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
        Op::Softmax => {
            // (diag(p) − p pᵀ) g, row by row
            let mut g = grad.clone();
            for r in 0..output.rows() {
                let p = output.row(r);
                let dot = p.iter().zip(grad.row(r)).fold(0.0, |a, (&pi, &gi)| a + pi * gi);
                for (gv, &pi) in g.row_mut(r).iter_mut().zip(p) {
                    *gv = pi * (*gv - dot);
                }
            }
            vec![Some(g)]
        }
        Op::Gelu => vec![Some(inputs[0].zip_map(grad, "gelu", |x, g| g * tensor::gelu_derivative(x))?)],
        Op::LayerNorm { eps } => layer_norm_vjp(inputs[0], inputs[1], grad, *eps),
        Op::Scale(c) => vec![Some(grad.scale(*c))],
        Op::SplitHeads(_) => vec![Some(merge_heads(grad)?)],
        Op::MergeHeads => {
            let heads = inputs[0].shape()[0];
            vec![Some(split_heads(grad, heads)?)]
        }
        Op::TransposeLast => vec![Some(grad.transpose_last())],
        Op::SelectCls => {
            let mut g = Tensor::zeros(inputs[0].shape());
            g.row_mut(0).copy_from_slice(grad.data());
            vec![Some(g)]
        }
    };
    Ok(out)
}

fn layer_norm_vjp(x: &Tensor, gamma: &Tensor, grad: &Tensor, eps: f64) -> Vec<Option<Tensor>> {
    let d = x.last_dim();
    let n = d as f64;
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, inv_std) = tensor::row_stats(row, eps);
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
        let gy = grad.row(r);
        let dxhat: Vec<f64> = gy.iter().zip(gamma.data()).map(|(&g, &w)| g * w).collect();
        let mean_dxhat = dxhat.iter().fold(0.0, |a, &v| a + v) / n;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).fold(0.0, |a, (&u, &v)| a + u * v) / n;
        for j in 0..d {
            gx.row_mut(r)[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            gg[j] += gy[j] * xhat[j];
            gb[j] += gy[j];
        }
    }
    vec![
        Some(gx),
        Some(Tensor::new(gamma.shape().to_vec(), gg).expect("gamma shape")),
        Some(Tensor::new(gamma.shape().to_vec(), gb).expect("beta shape")),
    ]
}

fn embed_vjp(kind: &EmbedKind, inputs: &[&Tensor], grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let d = grad.last_dim();
    let s = grad.rows();
    match kind {
        EmbedKind::Patches { patch } => {
            let (image, w, cls, pos) = (inputs[0], inputs[1], inputs[3], inputs[4]);
            let patches = patchify(image, *patch)?;
            let gproj = Tensor::new(vec![s - 1, d], grad.data()[d..].to_vec())?;
            let gw = tensor::matmul(&patches.transpose_last(), &gproj)?;
            let gb = gproj.sum_rows();
            let gpatches = tensor::matmul(&gproj, &w.transpose_last())?;
            let gimage = unpatchify(&gpatches, *patch, image.shape()[0], image.shape()[1]);
            let gcls = Tensor::new(cls.shape().to_vec(), grad.row(0).to_vec())?;
            let gpos = Tensor::new(pos.shape().to_vec(), grad.data().to_vec())?;
            Ok(vec![Some(gimage), Some(gw), Some(gb), Some(gcls), Some(gpos)])
        }
        EmbedKind::Tokens => {
            let (ids, table, pos) = (inputs[0], inputs[1], inputs[2]);
            let ids = token_ids(ids, table.rows())?;
            let mut gtable = Tensor::zeros(table.shape());
            let mut gpos = Tensor::zeros(pos.shape());
            for r in 0..s {
                let id = if r == 0 { 0 } else { ids[r - 1] };
                for j in 0..d {
                    gtable.data_mut()[id * d + j] += grad.data()[r * d + j];
                    gpos.data_mut()[r * d + j] = grad.data()[r * d + j];
                }
            }
            Ok(vec![None, Some(gtable), Some(gpos)])
        }
    }
}

/// Gradients of one scalar output with respect to every record on a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// ∇A for attention block `block`.
    pub fn attention(&self, tape: &Tape, block: usize) -> Option<&Tensor> {
        tape.attention_id(block).and_then(|id| self.wrt(id))
    }

    pub fn input(&self, tape: &Tape) -> Option<&Tensor> {
        tape.input_id().and_then(|id| self.wrt(id))
    }

    pub fn param(&self, tape: &Tape, name: &str) -> Option<&Tensor> {
        tape.param_id(name).and_then(|id| self.wrt(id))
    }

    /// Gradients of every named parameter (zeros for unused ones).
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        tape.records()
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match &r.op {
                Op::Param(name) => Some((
                    name.clone(),
                    self.grads[i].clone().unwrap_or_else(|| Tensor::zeros(r.output.shape())),
                )),
                _ => None,
            })
            .collect()
    }
}

/// Reverse-mode pass seeded with the one-hot vector at `target` on the
/// output logits, i.e. gradients of `y_target`.
pub fn backward(tape: &Tape, target: usize) -> Result<Gradients> {
    let out = tape
        .output_id()
        .ok_or_else(|| Error::InvalidArgument("tape has no output".into()))?;
    let shape = tape.value(out).shape().to_vec();
    let classes = tape.value(out).len();
    if target >= classes {
        return Err(Error::ClassOutOfRange { index: target, classes });
    }
    let mut seed = Tensor::zeros(&shape);
    seed.data_mut()[target] = 1.0;
    backward_with_seed(tape, &seed)
}

/// Reverse-mode pass with an arbitrary output cotangent.
pub fn backward_with_seed(tape: &Tape, seed: &Tensor) -> Result<Gradients> {
    let out = tape
        .output_id()
        .ok_or_else(|| Error::InvalidArgument("tape has no output".into()))?;
    let out_shape = tape.value(out).shape();
    let seed = if seed.shape() == out_shape {
        seed.clone()
    } else if seed.len() == tape.value(out).len() {
        seed.reshape(out_shape)?
    } else {
        return Err(Error::shape("backward", out_shape, seed.shape()));
    };
    let mut grads: Vec<Option<Tensor>> = vec![None; tape.len()];
    grads[out.0] = Some(seed);
    for n in (0..tape.len()).rev() {
        let rec = &tape.records()[n];
        if rec.op.is_leaf() {
            continue;
        }
        let Some(g) = grads[n].take() else { continue };
        let ins = tape.saved_inputs(NodeId(n));
        let parts = vjp(&rec.op, &ins, &rec.output, &g).map_err(|e| e.at_layer(n))?;
        for (&input, part) in rec.inputs.iter().zip(parts) {
            let Some(part) = part else { continue };
            accumulate(&mut grads[input.0], part)?;
        }
        grads[n] = Some(g);
    }
    Ok(Gradients { grads })
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, part: Tensor) -> Result<()> {
    match slot {
        Some(existing) => *existing = tensor::add(existing, &part)?,
        None => *slot = Some(part),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn linear_model(w: &Tensor, x: &Tensor) -> Tape {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let wi = tape.param("w", w.clone());
        let y = tape.linear(xi, wi, None).unwrap();
        tape.set_output(y);
        tape
    }

    #[test]
    fn seed_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = linear_model(&random(&[3, 4], &mut rng), &random(&[1, 3], &mut rng));
        let g = backward(&tape, 2).unwrap();
        assert_eq!(g.wrt(tape.output_id().unwrap()).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn linear_gradient_is_weight_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[3, 4], &mut rng);
        let tape = linear_model(&w, &random(&[1, 3], &mut rng));
        let g = backward(&tape, 1).unwrap();
        let gx = g.input(&tape).unwrap();
        for j in 0..3 {
            assert_eq!(gx.data()[j], w.get(&[j, 1]));
        }
    }

    #[test]
    fn class_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = linear_model(&random(&[3, 2], &mut rng), &random(&[1, 3], &mut rng));
        assert!(matches!(backward(&tape, 2), Err(Error::ClassOutOfRange { index: 2, classes: 2 })));
    }

    #[test]
    fn euler_identity_on_linear_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.input(random(&[1, 5], &mut rng));
            let w1 = tape.param("w1", random(&[5, 6], &mut rng));
            let w2 = tape.param("w2", random(&[6, 3], &mut rng));
            let h = tape.linear(x, w1, None).unwrap();
            let y = tape.linear(h, w2, None).unwrap();
            tape.set_output(y);
            for t in 0..3 {
                let g = backward(&tape, t).unwrap();
                let gx = g.input(&tape).unwrap();
                let dot: f64 = gx.data().iter().zip(tape.value(x).data()).map(|(a, b)| a * b).sum();
                assert!((dot - tape.value(y).data()[t]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.input(random(&[3, 4], &mut rng));
        let a = tape.softmax(x).unwrap();
        let g = tape.gelu(a).unwrap();
        let s = tape.select_cls(g).unwrap();
        tape.set_output(s);
        let g1 = backward(&tape, 1).unwrap();
        let g2 = backward(&tape, 1).unwrap();
        assert_eq!(g1.input(&tape), g2.input(&tape));
    }

    #[test]
    fn head_split_merge_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[5, 6], &mut rng);
        let h = split_heads(&x, 3).unwrap();
        assert_eq!(h.shape(), &[3, 5, 2]);
        assert_eq!(h.get(&[1, 4, 0]), x.get(&[4, 2]));
        assert_eq!(merge_heads(&h).unwrap(), x);
    }

    // Central differences on each primitive VJP.
    #[test]
    fn vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases: Vec<(Op, Vec<Tensor>)> = vec![
            (Op::Softmax, vec![random(&[2, 4], &mut rng)]),
            (Op::Gelu, vec![random(&[2, 3], &mut rng)]),
            (
                Op::LayerNorm { eps: 1e-5 },
                vec![random(&[3, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)],
            ),
            (Op::MatMul, vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)]),
            (
                Op::Linear,
                vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)],
            ),
        ];
        for (op, inputs) in cases {
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let out = forward(&op, &refs).unwrap();
            let probe = random(out.shape(), &mut rng);
            let grads = vjp(&op, &refs, &out, &probe).unwrap();
            for (k, g) in grads.iter().enumerate() {
                let g = g.as_ref().unwrap();
                for idx in 0..inputs[k].len() {
                    let h = 1e-6;
                    let mut plus = inputs.clone();
                    plus[k].data_mut()[idx] += h;
                    let mut minus = inputs.clone();
                    minus[k].data_mut()[idx] -= h;
                    let f = |ins: &Vec<Tensor>| {
                        let r: Vec<&Tensor> = ins.iter().collect();
                        let o = forward(&op, &r).unwrap();
                        o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
                    };
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    assert!((fd - g.data()[idx]).abs() < 1e-7, "{op:?} input {k}[{idx}]: {fd} vs {}", g.data()[idx]);
                }
            }
        }
    }
}
