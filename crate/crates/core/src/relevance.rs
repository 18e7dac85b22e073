//! Relevance propagation rules and the full backward relevance pass.
//!
//! All rules use per-output denominators `z_i`. A denominator with
//! `|z_i| < ε` is pushed away from zero to `z_i + ε·sign(z_i)`, with
//! `sign(0) = +1`; larger denominators are used as they are, so conserving
//! rules conserve to rounding error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{self, merge_heads, split_heads, NodeId, Op, OpKind, Tape};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearRule {
    /// Only pairs with `x_j·w_ji ≥ 0` share the relevance of output `i`.
    PositiveSubset,
    /// Separate positive (`x⁺w⁺`) and negative (`x⁻w⁻`) branches, each
    /// normalized on its own.
    ClassicLrp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleSet {
    pub linear_rule: LinearRule,
    pub epsilon: f64,
    pub normalize_binary: bool,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            linear_rule: LinearRule::PositiveSubset,
            epsilon: DEFAULT_EPSILON,
            normalize_binary: true,
        }
    }
}

impl RuleSet {
    pub fn new(linear_rule: LinearRule, epsilon: f64, normalize_binary: bool) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(RuleSet {
            linear_rule,
            epsilon,
            normalize_binary,
        })
    }

    pub fn positive_subset() -> Self {
        Self::default()
    }

    /// Plain LRP: classic linear rule, no binary-operator normalization.
    pub fn classic_lrp() -> Self {
        RuleSet {
            linear_rule: LinearRule::ClassicLrp,
            epsilon: DEFAULT_EPSILON,
            normalize_binary: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceVector {
    pub values: Tensor,
    pub layer_index: usize,
}

impl RelevanceVector {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// One-hot starting relevance at the target class.
pub fn init_relevance(target: usize, classes: usize) -> Result<RelevanceVector> {
    if target >= classes {
        return Err(Error::ClassOutOfRange { index: target, classes });
    }
    let mut values = Tensor::zeros(&[classes]);
    values.data_mut()[target] = 1.0;
    Ok(RelevanceVector { values, layer_index: 0 })
}

fn stabilize(z: f64, eps: f64) -> f64 {
    if z.abs() >= eps {
        z
    } else if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

fn safe_ratio(r: &Tensor, z: &Tensor, eps: f64) -> Result<Tensor> {
    r.zip_map(z, "relevance", |r, z| r / stabilize(z, eps))
}

/// Generic decomposition through one recorded layer:
/// `R_j = X_j · Σ_i ∂L_i/∂X_j · R_i / z_i`, for every input of the record.
/// Parameter inputs get `None`.
pub fn propagate_generic(tape: &Tape, node: NodeId, r_in: &Tensor, eps: f64) -> Result<Vec<Option<Tensor>>> {
    let rec = tape.record(node);
    if r_in.shape() != rec.output.shape() {
        return Err(Error::shape("propagate_generic", rec.output.shape(), r_in.shape()));
    }
    let s = safe_ratio(r_in, &rec.output, eps)?;
    let ins = tape.saved_inputs(node);
    let cs = tape::vjp(&rec.op, &ins, &rec.output, &s)?;
    rec.inputs
        .iter()
        .zip(ins)
        .zip(cs)
        .map(|((&id, x), c)| match (tape.record(id).kind(), c) {
            (OpKind::Param, _) | (_, None) => Ok(None),
            (_, Some(c)) => tensor::hadamard(x, &c).map(Some),
        })
        .collect()
}

/// Result of a linear rule: input relevance plus `Σ R_in − Σ R_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRelevance {
    pub relevance: Tensor,
    pub defect: f64,
}

struct LinearView {
    x: Tensor,
    r: Tensor,
    out_shape: Vec<usize>,
}

fn linear_view(x: &Tensor, w: &Tensor, r_in: &Tensor) -> Result<LinearView> {
    let x2 = if x.rank() == 1 { x.reshape(&[1, x.len()])? } else { x.clone() };
    let r2 = if r_in.rank() == 1 { r_in.reshape(&[1, r_in.len()])? } else { r_in.clone() };
    if x2.rank() != 2 || w.rank() != 2 || x2.shape()[1] != w.shape()[0] {
        return Err(Error::shape("linear relevance", x.shape(), w.shape()));
    }
    if r2.shape() != [x2.shape()[0], w.shape()[1]] {
        return Err(Error::shape("linear relevance", w.shape(), r_in.shape()));
    }
    Ok(LinearView {
        x: x2,
        r: r2,
        out_shape: x.shape().to_vec(),
    })
}

/// Positive-subset rule: output `i` distributes its relevance over the pairs
/// `q = {(i, j) | x_j·w_ji ≥ 0}` in proportion to `x_j·w_ji`. An output with
/// an all-zero subset passes nothing down; the loss shows up in `defect`.
pub fn propagate_linear_positive_subset(x: &Tensor, w: &Tensor, r_in: &Tensor, eps: f64) -> Result<LinearRelevance> {
    let LinearView { x, r, out_shape } = linear_view(x, w, r_in)?;
    let (rows, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    let mut out = Tensor::zeros(&[rows, din]);
    for row in 0..rows {
        let xr = x.row(row);
        for i in 0..dout {
            let ri = r.get(&[row, i]);
            let mut z = 0.0;
            for (j, &xj) in xr.iter().enumerate() {
                let c = xj * w.data()[j * dout + i];
                if c >= 0.0 {
                    z += c;
                }
            }
            if z == 0.0 {
                continue;
            }
            let scale = ri / stabilize(z, eps);
            let out_row = out.row_mut(row);
            for (j, &xj) in xr.iter().enumerate() {
                let c = xj * w.data()[j * dout + i];
                if c >= 0.0 {
                    out_row[j] += c * scale;
                }
            }
        }
    }
    let defect = r.sum() - out.sum();
    Ok(LinearRelevance {
        relevance: out.reshape(&out_shape)?,
        defect,
    })
}

/// Classic two-branch LRP rule over `(x⁺, w⁺)` and `(x⁻, w⁻)`.
pub fn propagate_lrp_classic(x: &Tensor, w: &Tensor, r_in: &Tensor, eps: f64) -> Result<Tensor> {
    let LinearView { x, r, out_shape } = linear_view(x, w, r_in)?;
    let (rows, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    let pos = |v: f64| v.max(0.0);
    let neg = |v: f64| v.min(0.0);
    let mut out = Tensor::zeros(&[rows, din]);
    for row in 0..rows {
        let xr = x.row(row);
        for i in 0..dout {
            let ri = r.get(&[row, i]);
            for part in [pos, neg] {
                let mut z = 0.0;
                for (j, &xj) in xr.iter().enumerate() {
                    z += part(xj) * part(w.data()[j * dout + i]);
                }
                let scale = ri / stabilize(z, eps);
                let out_row = out.row_mut(row);
                for (j, &xj) in xr.iter().enumerate() {
                    out_row[j] += part(xj) * part(w.data()[j * dout + i]) * scale;
                }
            }
        }
    }
    out.reshape(&out_shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    MatMul,
}

/// Relevance of both operands of `u + v` or `u·v`, each computed with the
/// other operand held fixed. Not normalized.
pub fn propagate_binary(u: &Tensor, v: &Tensor, r_in: &Tensor, op: BinaryOp, eps: f64) -> Result<(Tensor, Tensor)> {
    match op {
        BinaryOp::Add => {
            let z = tensor::add(u, v)?;
            if r_in.shape() != z.shape() {
                return Err(Error::shape("propagate_binary", z.shape(), r_in.shape()));
            }
            let s = safe_ratio(r_in, &z, eps)?;
            Ok((tensor::hadamard(u, &s)?, tensor::hadamard(v, &s)?))
        }
        BinaryOp::MatMul => {
            let z = tensor::matmul(u, v)?;
            if r_in.shape() != z.shape() {
                return Err(Error::shape("propagate_binary", z.shape(), r_in.shape()));
            }
            let s = safe_ratio(r_in, &z, eps)?;
            let cu = tensor::matmul(&s, &v.transpose_last())?;
            let cv = tensor::matmul(&u.transpose_last(), &s)?;
            Ok((tensor::hadamard(u, &cu)?, tensor::hadamard(v, &cv)?))
        }
    }
}

/// Rescales the two operand relevances so that they share `prev_sum` in
/// proportion to their absolute mass. A branch whose signed sum is within
/// `eps` of zero gets nothing and the other branch takes all of `prev_sum`.
pub fn normalize_binary(ru: &Tensor, rv: &Tensor, prev_sum: f64, eps: f64) -> (Tensor, Tensor) {
    let (au, av) = (ru.abs_sum(), rv.abs_sum());
    let (su, sv) = (ru.sum(), rv.sum());
    let u_dead = su.abs() <= eps;
    let v_dead = sv.abs() <= eps;
    let zeros = |t: &Tensor| Tensor::zeros(t.shape());
    match (u_dead, v_dead) {
        (true, true) => (zeros(ru), zeros(rv)),
        (true, false) => (zeros(ru), rv.scale(prev_sum / sv)),
        (false, true) => (ru.scale(prev_sum / su), zeros(rv)),
        (false, false) => {
            let total = au + av;
            (
                ru.scale(au / total * (prev_sum / su)),
                rv.scale(av / total * (prev_sum / sv)),
            )
        }
    }
}

/// Per-record bookkeeping of one relevance pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: OpKind,
    pub block: Option<usize>,
    /// Σ relevance arriving at the record's output.
    pub total: f64,
    /// `total − Σ relevance handed to its inputs`.
    pub defect: f64,
    /// Σ relevance over every pending record once this one is processed.
    pub cut_total: f64,
}

#[derive(Debug, Clone)]
pub struct RelevancePass {
    relevance: Vec<Option<Tensor>>,
    layers: Vec<LayerSummary>,
    embedding: Option<NodeId>,
    attention: BTreeMap<usize, NodeId>,
}

impl RelevancePass {
    pub fn get(&self, id: NodeId) -> Option<RelevanceVector> {
        self.relevance.get(id.0).and_then(|r| {
            r.as_ref().map(|values| RelevanceVector {
                values: values.clone(),
                layer_index: id.0,
            })
        })
    }

    pub fn values(&self, id: NodeId) -> Option<&Tensor> {
        self.relevance.get(id.0).and_then(Option::as_ref)
    }

    /// Every record that received relevance, keyed by record index.
    pub fn vectors(&self) -> BTreeMap<usize, RelevanceVector> {
        (0..self.relevance.len())
            .filter_map(|i| self.get(NodeId(i)).map(|v| (i, v)))
            .collect()
    }

    /// Records in the order they were processed (output first).
    pub fn layers(&self) -> &[LayerSummary] {
        &self.layers
    }

    /// Relevance attached to the attention map of block `b` (h×s×s).
    pub fn attention(&self, block: usize) -> Option<&Tensor> {
        self.attention.get(&block).and_then(|&id| self.values(id))
    }

    /// Relevance at the embedding output (s×d), the deepest layer reached.
    pub fn embedding(&self) -> Option<&Tensor> {
        self.embedding.and_then(|id| self.values(id))
    }

    pub fn max_defect(&self) -> f64 {
        self.layers.iter().map(|l| l.defect.abs()).fold(0.0, f64::max)
    }
}

/// Backward relevance pass from the one-hot at `target` down to the
/// embedding output (or to the input leaves of a tape without embedding).
///
/// Linear records use `rules.linear_rule`; add and matmul records use
/// [`propagate_binary`] followed, when enabled, by [`normalize_binary`];
/// every other record hands its relevance through unchanged (reshaped as
/// needed). The relevance reaching each attention softmax is kept as that
/// block's attention relevance.
pub fn propagate_network(tape: &Tape, target: usize, rules: &RuleSet) -> Result<RelevancePass> {
    let out = tape
        .output_id()
        .ok_or_else(|| Error::InvalidArgument("tape has no output".into()))?;
    let out_value = tape.value(out);
    let init = init_relevance(target, out_value.len())?;
    let mut relevance: Vec<Option<Tensor>> = vec![None; tape.len()];
    relevance[out.0] = Some(init.values.reshape(out_value.shape())?);

    let mut layers = Vec::new();
    let mut attention = BTreeMap::new();
    let mut cut = 1.0;
    let stop = tape.embedding_id();

    for n in (0..=out.0).rev() {
        let rec = tape.record(NodeId(n));
        if rec.is_attention_map {
            if let Some(b) = rec.block {
                attention.insert(b, NodeId(n));
            }
        }
        if rec.op.is_leaf() || Some(NodeId(n)) == stop {
            continue;
        }
        let Some(r) = relevance[n].clone() else { continue };
        let parts = layer_relevance(tape, NodeId(n), &r, rules).map_err(|e| e.at_layer(n))?;
        let total = r.sum();
        let mut delivered = 0.0;
        for (&input, part) in rec.inputs.iter().zip(parts) {
            let Some(part) = part else { continue };
            if tape.record(input).kind() == OpKind::Param {
                continue;
            }
            delivered += part.sum();
            tape::accumulate(&mut relevance[input.0], part).map_err(|e| e.at_layer(n))?;
        }
        cut += delivered - total;
        layers.push(LayerSummary {
            index: n,
            kind: rec.kind(),
            block: rec.block,
            total,
            defect: total - delivered,
            cut_total: cut,
        });
    }
    Ok(RelevancePass {
        relevance,
        layers,
        embedding: stop,
        attention,
    })
}

fn layer_relevance(tape: &Tape, node: NodeId, r: &Tensor, rules: &RuleSet) -> Result<Vec<Option<Tensor>>> {
    let rec = tape.record(node);
    let ins = tape.saved_inputs(node);
    let eps = rules.epsilon;
    Ok(match &rec.op {
        Op::Linear => {
            let rx = match rules.linear_rule {
                LinearRule::PositiveSubset => propagate_linear_positive_subset(ins[0], ins[1], r, eps)?.relevance,
                LinearRule::ClassicLrp => propagate_lrp_classic(ins[0], ins[1], r, eps)?,
            };
            let mut v = vec![Some(rx)];
            v.resize(ins.len(), None);
            v
        }
        Op::Add | Op::MatMul => {
            let op = if rec.kind() == OpKind::Add { BinaryOp::Add } else { BinaryOp::MatMul };
            let (ru, rv) = propagate_binary(ins[0], ins[1], r, op, eps)?;
            let (ru, rv) = if rules.normalize_binary {
                normalize_binary(&ru, &rv, r.sum(), eps)
            } else {
                (ru, rv)
            };
            vec![Some(ru), Some(rv)]
        }
        Op::Softmax | Op::Gelu | Op::Scale(_) => vec![Some(r.clone())],
        Op::LayerNorm { .. } => vec![Some(r.clone()), None, None],
        Op::SplitHeads(_) => vec![Some(merge_heads(r)?)],
        Op::MergeHeads => vec![Some(split_heads(r, ins[0].shape()[0])?)],
        Op::TransposeLast => vec![Some(r.transpose_last())],
        Op::SelectCls => {
            let mut full = Tensor::zeros(ins[0].shape());
            full.row_mut(0).copy_from_slice(r.data());
            vec![Some(full)]
        }
        Op::Embed(_) | Op::Input | Op::Param(_) => vec![None; ins.len()],
    })
}
