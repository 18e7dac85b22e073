//! Micro ViT/BERT-style classifier whose forward pass is recorded on a
//! [`Tape`].
//!
//! Blocks are pre-norm: `x + MHSA(LN(x))` then `x + MLP(LN(x))`. The head
//! reads the CLS row of the final LayerNorm output. Attention logits are
//! scaled by `1/√d_h` before the softmax.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{self, EmbedKind, NodeId, Tape};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    Image {
        height: usize,
        width: usize,
        patch_size: usize,
    },
    Text {
        vocab_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputSpec,
    /// Maximum sequence length including CLS. Fixed by the grid for images.
    pub seq_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub classes: usize,
    pub mlp_dim: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale image classifier: d=16, two heads of 8, two blocks.
    pub fn image(height: usize, width: usize, patch_size: usize, classes: usize) -> Self {
        let grid = height.checked_div(patch_size).unwrap_or(0) * width.checked_div(patch_size).unwrap_or(0);
        ModelConfig {
            input: InputSpec::Image {
                height,
                width,
                patch_size,
            },
            seq_len: 1 + grid,
            embed_dim: 16,
            heads: 2,
            head_dim: 8,
            blocks: 2,
            classes,
            mlp_dim: 32,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn text(vocab_size: usize, max_tokens: usize, classes: usize) -> Self {
        ModelConfig {
            input: InputSpec::Text { vocab_size },
            seq_len: max_tokens + 1,
            ..Self::image(4, 4, 4, classes)
        }
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn with_heads(mut self, heads: usize, head_dim: usize) -> Self {
        self.heads = heads;
        self.head_dim = head_dim;
        self.embed_dim = heads * head_dim;
        self
    }

    pub fn modality(&self) -> Modality {
        match self.input {
            InputSpec::Image { .. } => Modality::Image,
            InputSpec::Text { .. } => Modality::Text,
        }
    }

    /// Patch grid `(rows, cols)` for image models.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match self.input {
            InputSpec::Image {
                height,
                width,
                patch_size,
            } => Some((height / patch_size, width / patch_size)),
            InputSpec::Text { .. } => None,
        }
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        match self.input {
            InputSpec::Image { height, width, .. } => Some((height, width)),
            InputSpec::Text { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.head_dim == 0 || self.heads * self.head_dim != self.embed_dim {
            return fail(format!(
                "heads ({}) × head_dim ({}) must equal embed_dim ({})",
                self.heads, self.head_dim, self.embed_dim
            ));
        }
        if self.classes == 0 || self.mlp_dim == 0 || self.seq_len == 0 {
            return fail("classes, mlp_dim and seq_len must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        match self.input {
            InputSpec::Image {
                height,
                width,
                patch_size,
            } => {
                if patch_size == 0 || height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0 {
                    return fail(format!("{height}×{width} image is not divisible into {patch_size}×{patch_size} patches"));
                }
                let s = 1 + (height / patch_size) * (width / patch_size);
                if self.seq_len != s {
                    return fail(format!("seq_len {} does not match 1 + patch count = {s}", self.seq_len));
                }
            }
            InputSpec::Text { vocab_size } => {
                if vocab_size < 2 {
                    return fail("vocab_size must be at least 2 (CLS and UNK)".into());
                }
            }
        }
        Ok(())
    }

    /// Name and shape of every parameter the model owns.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        match self.input {
            InputSpec::Image { patch_size, .. } => {
                out.push(("embed.patch.weight".into(), vec![patch_size * patch_size, d]));
                out.push(("embed.patch.bias".into(), vec![d]));
                out.push(("embed.cls".into(), vec![1, d]));
            }
            InputSpec::Text { vocab_size } => {
                out.push(("embed.tokens".into(), vec![vocab_size, d]));
            }
        }
        out.push(("embed.pos".into(), vec![self.seq_len, d]));
        for k in 0..self.blocks {
            let p = |s: &str| format!("blocks.{k}.{s}");
            for ln in ["ln1", "ln2"] {
                out.push((p(&format!("{ln}.gamma")), vec![d]));
                out.push((p(&format!("{ln}.beta")), vec![d]));
            }
            for proj in ["q", "k", "v", "out"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("mlp.fc1.weight"), vec![d, self.mlp_dim]));
            out.push((p("mlp.fc1.bias"), vec![self.mlp_dim]));
            out.push((p("mlp.fc2.weight"), vec![self.mlp_dim, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("norm.gamma".into(), vec![d]));
        out.push(("norm.beta".into(), vec![d]));
        out.push(("head.weight".into(), vec![d, self.classes]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    /// Grayscale image, `H×W`, values in `[0, 1]`.
    Image(Tensor),
    /// Content token ids; CLS (id 0) is prepended by the embedding.
    Tokens(Vec<usize>),
}

impl ModelInput {
    pub fn as_image(&self) -> Option<&Tensor> {
        match self {
            ModelInput::Image(t) => Some(t),
            ModelInput::Tokens(_) => None,
        }
    }

    /// Number of content tokens (patches or words) the input produces.
    pub fn content_tokens(&self, config: &ModelConfig) -> usize {
        match self {
            ModelInput::Image(_) => config.seq_len - 1,
            ModelInput::Tokens(ids) => ids.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn from_parameters(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(Model { config, params })
    }

    /// Training initialization: weights `N(0, 1/fan_in)` with small position
    /// and CLS embeddings. Head and biases start at zero, LayerNorm gains at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Model::sample(config, seed, false)
    }

    /// Every parameter random, the head and LayerNorm affine terms included.
    /// Used by property tests.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        Model::sample(config, seed, true)
    }

    fn sample(config: ModelConfig, seed: u64, everything: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".gamma") {
                match everything {
                    true => Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5)),
                    false => Tensor::ones(&shape),
                }
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                match everything {
                    true => Tensor::from_fn(&shape, |_| rng.random_range(-0.2..0.2)),
                    false => Tensor::zeros(&shape),
                }
            } else if name == "head.weight" && !everything {
                Tensor::zeros(&shape)
            } else {
                let std = match name.as_str() {
                    "embed.pos" | "embed.cls" if everything => 0.5,
                    "embed.pos" | "embed.cls" => 0.02,
                    "embed.tokens" => 1.0,
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            };
            params.insert(name, t);
        }
        Model::from_parameters(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        if slot.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: name.into(),
                found: value.shape().to_vec(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        match (&self.config.input, input) {
            (InputSpec::Image { height, width, .. }, ModelInput::Image(img)) => {
                if img.shape() != [*height, *width] {
                    return Err(Error::InputMismatch(format!(
                        "image is {:?}, model expects [{height}, {width}]",
                        img.shape()
                    )));
                }
            }
            (InputSpec::Text { vocab_size }, ModelInput::Tokens(ids)) => {
                if ids.is_empty() {
                    return Err(Error::InputMismatch("empty token sequence".into()));
                }
                if ids.len() + 1 > self.config.seq_len {
                    return Err(Error::InputMismatch(format!(
                        "{} tokens exceed the model's maximum of {}",
                        ids.len(),
                        self.config.seq_len - 1
                    )));
                }
                if let Some(bad) = ids.iter().find(|&&i| i >= *vocab_size) {
                    return Err(Error::InputMismatch(format!("token id {bad} outside vocabulary of {vocab_size}")));
                }
            }
            (spec, _) => {
                return Err(Error::InputMismatch(format!("input modality does not match model input {spec:?}")));
            }
        }
        Ok(())
    }

    fn leaf(&self, tape: &mut Tape, name: &str) -> NodeId {
        tape.param(name, self.params[name].clone())
    }

    fn record_embedding(&self, tape: &mut Tape, input: &ModelInput) -> Result<NodeId> {
        self.check_input(input)?;
        match (&self.config.input, input) {
            (InputSpec::Image { patch_size, .. }, ModelInput::Image(img)) => {
                let x = tape.input(img.clone());
                let inputs = vec![
                    x,
                    self.leaf(tape, "embed.patch.weight"),
                    self.leaf(tape, "embed.patch.bias"),
                    self.leaf(tape, "embed.cls"),
                    self.leaf(tape, "embed.pos"),
                ];
                tape.embed(EmbedKind::Patches { patch: *patch_size }, inputs)
            }
            (InputSpec::Text { .. }, ModelInput::Tokens(ids)) => {
                let x = tape.input(Tensor::from_vec(ids.iter().map(|&i| i as f64).collect()));
                let inputs = vec![x, self.leaf(tape, "embed.tokens"), self.leaf(tape, "embed.pos")];
                tape.embed(EmbedKind::Tokens, inputs)
            }
            _ => unreachable!("checked by check_input"),
        }
    }

    /// Token embeddings (`s×d`) with CLS at row 0.
    pub fn embed_input(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let id = self.record_embedding(&mut tape, input)?;
        Ok(tape.value(id).clone())
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.leaf(tape, &format!("{prefix}.weight"));
        let b = self.leaf(tape, &format!("{prefix}.bias"));
        tape.linear(x, w, Some(b))
    }

    fn layer_norm(&self, tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.leaf(tape, &format!("{prefix}.gamma"));
        let b = self.leaf(tape, &format!("{prefix}.beta"));
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    /// Records multi-head attention of execution-order block `k` on an
    /// already normalized input. Returns the per-head output `O` and the
    /// attention map `A`.
    fn record_attention(&self, tape: &mut Tape, k: usize, x: NodeId) -> Result<(NodeId, NodeId)> {
        let heads = self.config.heads;
        let block = self.config.blocks - k;
        let q = self.linear(tape, x, &format!("blocks.{k}.attn.q"))?;
        let kk = self.linear(tape, x, &format!("blocks.{k}.attn.k"))?;
        let v = self.linear(tape, x, &format!("blocks.{k}.attn.v"))?;
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(kk, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let kt = tape.transpose_last(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (self.config.head_dim as f64).sqrt())?;
        let a = tape.attention_softmax(scaled, block)?;
        let o = tape.matmul(a, vh)?;
        Ok((o, a))
    }

    /// One attention sublayer in isolation: `x` is the (normalized) block
    /// input, `block` uses output-side numbering. Returns `O` (h×s×d_h) and
    /// `A` (h×s×s).
    pub fn attention_forward(&self, block: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if block == 0 || block > self.config.blocks {
            return Err(Error::InvalidArgument(format!(
                "block {block} outside 1..={}",
                self.config.blocks
            )));
        }
        if x.rank() != 2 || x.last_dim() != self.config.embed_dim {
            return Err(Error::shape("attention_forward", x.shape(), &[self.config.embed_dim]));
        }
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let (o, a) = self.record_attention(&mut tape, self.config.blocks - block, xi)?;
        Ok((tape.value(o).clone(), tape.value(a).clone()))
    }

    /// Full forward pass on a fresh tape.
    pub fn record(&self, input: &ModelInput) -> Result<Tape> {
        let mut tape = Tape::new();
        let mut x = self.record_embedding(&mut tape, input)?;
        for k in 0..self.config.blocks {
            let start = tape.len();
            let h = self.layer_norm(&mut tape, x, &format!("blocks.{k}.ln1"))?;
            let (o, _) = self.record_attention(&mut tape, k, h)?;
            let merged = tape.merge_heads(o)?;
            let proj = self.linear(&mut tape, merged, &format!("blocks.{k}.attn.out"))?;
            x = tape.add(x, proj)?;
            let h2 = self.layer_norm(&mut tape, x, &format!("blocks.{k}.ln2"))?;
            let f1 = self.linear(&mut tape, h2, &format!("blocks.{k}.mlp.fc1"))?;
            let g = tape.gelu(f1)?;
            let f2 = self.linear(&mut tape, g, &format!("blocks.{k}.mlp.fc2"))?;
            x = tape.add(x, f2)?;
            tape.tag_block(start, self.config.blocks - k);
        }
        let normed = self.layer_norm(&mut tape, x, "norm")?;
        let cls = tape.select_cls(normed)?;
        let logits = self.linear(&mut tape, cls, "head")?;
        tape.set_output(logits);
        Ok(tape)
    }

    /// Logits (length C) together with the tape that produced them.
    pub fn classify(&self, input: &ModelInput) -> Result<(Tensor, Tape)> {
        let tape = self.record(input)?;
        Ok((tape.output_logits()?, tape))
    }

    pub fn logits(&self, input: &ModelInput) -> Result<Tensor> {
        Ok(self.classify(input)?.0)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<usize> {
        Ok(self.logits(input)?.argmax())
    }

    pub fn to_json(&self) -> Result<String> {
        let parameters = self
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: nest(t.data(), t.shape()),
                    },
                )
            })
            .collect();
        let file = WeightFile {
            format_version: FORMAT_VERSION.to_string(),
            config: self.config.clone(),
            parameters,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let version = value
            .get("format_version")
            .ok_or_else(|| Error::Parse("missing field `format_version`".into()))?;
        match version.as_str() {
            Some(FORMAT_VERSION) => {}
            Some(other) => {
                return Err(Error::FormatVersion {
                    found: other.into(),
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(Error::Parse("`format_version` must be a string".into())),
        }
        let file: WeightFile = serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
        let mut params = BTreeMap::new();
        for (name, stored) in file.parameters {
            let data = flatten(&stored.values, &stored.shape).map_err(|m| Error::Parse(format!("parameter {name:?}: {m}")))?;
            let t = Tensor::new(stored.shape, data).map_err(|e| Error::Parse(format!("parameter {name:?}: {e}")))?;
            params.insert(name, t);
        }
        Model::from_parameters(file.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightFile {
    format_version: String,
    config: ModelConfig,
    parameters: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: Vec<usize>,
    values: serde_json::Value,
}

fn nest(data: &[f64], shape: &[usize]) -> serde_json::Value {
    if shape.len() == 1 {
        return serde_json::Value::Array(data.iter().map(|&v| serde_json::json!(v)).collect());
    }
    let stride: usize = shape[1..].iter().product();
    serde_json::Value::Array(data.chunks(stride).map(|c| nest(c, &shape[1..])).collect())
}

fn flatten(value: &serde_json::Value, shape: &[usize]) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    flatten_into(value, shape, &mut out)?;
    Ok(out)
}

fn flatten_into(value: &serde_json::Value, shape: &[usize], out: &mut Vec<f64>) -> std::result::Result<(), String> {
    let arr = value.as_array().ok_or("expected a nested array matching `shape`")?;
    let Some((&n, rest)) = shape.split_first() else {
        return Err("`shape` must not be empty".into());
    };
    if arr.len() != n {
        return Err(format!("array of length {} where the shape needs {n}", arr.len()));
    }
    for item in arr {
        if rest.is_empty() {
            out.push(item.as_f64().ok_or("expected a number")?);
        } else {
            flatten_into(item, rest, out)?;
        }
    }
    Ok(())
}

/// Central-difference check of `analytic` against `f` on the coordinates
/// `coords` of `point`. Returns the largest
/// `|analytic − fd| / max(|analytic|, 1e-8)`.
pub fn gradient_check(point: &[f64], analytic: &[f64], coords: &[usize], h: f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for &c in coords {
        let orig = p[c];
        p[c] = orig + h;
        let plus = f(&p)?;
        p[c] = orig - h;
        let minus = f(&p)?;
        p[c] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[c] - fd).abs() / analytic[c].abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares tape gradients of `y_t` with central differences on `n_coords`
/// coordinates sampled (with the given seed) from the input pixels and all
/// parameters.
pub fn finite_diff_check(model: &Model, input: &ModelInput, target: usize, h: f64, n_coords: usize, seed: u64) -> Result<f64> {
    if !(h > 0.0 && h <= 1e-1) {
        return Err(Error::InvalidArgument(format!("step {h} outside (0, 0.1]")));
    }
    let (_, tape) = model.classify(input)?;
    let grads = tape::backward(&tape, target)?;
    let pgrads = grads.params(&tape);

    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut point = Vec::new();
    let mut analytic = Vec::new();
    if let Some(img) = input.as_image() {
        point.extend_from_slice(img.data());
        analytic.extend_from_slice(grads.input(&tape).expect("image gradient").data());
    }
    for name in &names {
        point.extend_from_slice(model.params[name].data());
        analytic.extend_from_slice(pgrads[name].data());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = (0..n_coords).map(|_| rng.random_range(0..point.len())).collect();

    let rebuild = |flat: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        let mut offset = 0;
        let inp = match input {
            ModelInput::Image(img) => {
                offset = img.len();
                ModelInput::Image(Tensor::new(img.shape().to_vec(), flat[..offset].to_vec())?)
            }
            other => other.clone(),
        };
        for name in &names {
            let t = m.params.get_mut(name).expect("known name");
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(m.logits(&inp)?.data()[target])
    };
    gradient_check(&point, &analytic, &coords, h, rebuild)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::OpKind;
    use crate::tensor;

    fn image_model(seed: u64) -> Model {
        Model::random(ModelConfig::image(8, 8, 4, 2), seed).unwrap()
    }

    fn image(seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelInput::Image(Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::image(16, 16, 4, 2).validate().is_ok());
        assert!(ModelConfig::image(16, 15, 4, 2).validate().is_err());
        let mut c = ModelConfig::image(16, 16, 4, 2);
        c.head_dim = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::image(16, 16, 4, 2);
        c.seq_len = 10;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::image(8, 8, 4, 2).seq_len, 5);
    }

    #[test]
    fn embedding_shapes() {
        let m = image_model(1);
        assert_eq!(m.embed_input(&image(2)).unwrap().shape(), &[5, 16]);
        assert_eq!(m.embed_input(&image(2)).unwrap().row(0)[..3], {
            let cls = m.param("embed.cls").unwrap();
            let pos = m.param("embed.pos").unwrap();
            [cls.data()[0] + pos.data()[0], cls.data()[1] + pos.data()[1], cls.data()[2] + pos.data()[2]]
        });

        let t = Model::random(ModelConfig::text(20, 10, 2), 3).unwrap();
        let e = t.embed_input(&ModelInput::Tokens(vec![3, 4, 5, 6, 7, 8])).unwrap();
        assert_eq!(e.shape(), &[7, 16]);
        let table = t.param("embed.tokens").unwrap();
        let pos = t.param("embed.pos").unwrap();
        assert_eq!(e.get(&[0, 2]), table.get(&[0, 2]) + pos.get(&[0, 2]));
    }

    #[test]
    fn zero_image_rows_equal_projection_bias() {
        let mut m = image_model(4);
        m.set_param("embed.pos", Tensor::zeros(&[5, 16])).unwrap();
        let e = m.embed_input(&ModelInput::Image(Tensor::zeros(&[8, 8]))).unwrap();
        let bias = m.param("embed.patch.bias").unwrap();
        for r in 1..5 {
            assert_eq!(e.row(r), bias.data());
        }
    }

    #[test]
    fn input_mismatch_errors() {
        let m = image_model(5);
        assert!(matches!(m.classify(&ModelInput::Image(Tensor::zeros(&[4, 8]))), Err(Error::InputMismatch(_))));
        assert!(matches!(m.classify(&ModelInput::Tokens(vec![1])), Err(Error::InputMismatch(_))));
        let t = Model::random(ModelConfig::text(10, 4, 2), 1).unwrap();
        assert!(t.classify(&ModelInput::Tokens(vec![1; 5])).is_err());
        assert!(t.classify(&ModelInput::Tokens(vec![10])).is_err());
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut m = image_model(6);
        for k in ["blocks.0.attn.q", "blocks.0.attn.k"] {
            m.set_param(&format!("{k}.weight"), Tensor::zeros(&[16, 16])).unwrap();
            m.set_param(&format!("{k}.bias"), Tensor::zeros(&[16])).unwrap();
        }
        let x = m.embed_input(&image(7)).unwrap();
        let (_, a) = m.attention_forward(2, &x).unwrap();
        assert_eq!(a.shape(), &[2, 5, 5]);
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn uniform_attention_with_identity_values_averages_rows() {
        let mut m = image_model(8);
        for k in ["q", "k", "v"] {
            let w = if k == "v" { Tensor::eye(16) } else { Tensor::zeros(&[16, 16]) };
            m.set_param(&format!("blocks.0.attn.{k}.weight"), w).unwrap();
            m.set_param(&format!("blocks.0.attn.{k}.bias"), Tensor::zeros(&[16])).unwrap();
        }
        let x = m.embed_input(&image(9)).unwrap();
        let (o, _) = m.attention_forward(2, &x).unwrap();
        let mean = x.sum_rows().scale(1.0 / 5.0);
        let merged = tape::merge_heads(&o).unwrap();
        for r in 0..5 {
            for (a, b) in merged.row(r).iter().zip(mean.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        for seed in 0..10 {
            let m = image_model(seed);
            let (_, tape) = m.classify(&image(seed + 100)).unwrap();
            for b in 1..=2 {
                let a = tape.attention_map(b).unwrap();
                for r in 0..a.rows() {
                    let s: f64 = a.row(r).iter().sum();
                    assert!((s - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_structure_and_replay() {
        let m = Model::random(ModelConfig::image(8, 8, 4, 2).with_blocks(3), 10).unwrap();
        let input = image(11);
        let (logits, tape) = m.classify(&input).unwrap();
        assert_eq!(tape.num_blocks(), 3);
        let order: Vec<usize> = tape
            .records()
            .iter()
            .filter(|r| r.is_attention_map)
            .map(|r| r.block.unwrap())
            .collect();
        assert_eq!(order, vec![3, 2, 1]);
        assert_eq!(tape.replay().unwrap(), logits);
        assert_eq!(m.logits(&input).unwrap(), logits);
        assert!(logits.is_finite());
        assert_eq!(logits.len(), 2);
    }

    #[test]
    fn single_block_tape_has_one_attention_record() {
        let m = Model::random(ModelConfig::image(8, 8, 4, 2).with_blocks(1), 12).unwrap();
        let (_, tape) = m.classify(&image(1)).unwrap();
        assert_eq!(tape.records().iter().filter(|r| r.is_attention_map).count(), 1);
        assert_eq!(tape.records().iter().filter(|r| r.kind() == OpKind::Embed).count(), 1);
    }

    #[test]
    fn zero_block_model_is_head_of_normed_cls() {
        let m = Model::random(ModelConfig::image(8, 8, 4, 3).with_blocks(0), 13).unwrap();
        let input = image(14);
        let logits = m.logits(&input).unwrap();
        let e = m.embed_input(&input).unwrap();
        let cls = Tensor::new(vec![1, 16], e.row(0).to_vec()).unwrap();
        let normed = tensor::layer_norm(&cls, m.param("norm.gamma").unwrap(), m.param("norm.beta").unwrap(), 1e-5).unwrap();
        let expected = tensor::linear(&normed, m.param("head.weight").unwrap(), Some(m.param("head.bias").unwrap())).unwrap();
        assert_eq!(logits.data(), expected.data());
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let mut m = image_model(15);
        let zero_block = m.clone();
        for k in 0..2 {
            for p in ["attn.out", "mlp.fc2"] {
                let w = m.param(&format!("blocks.{k}.{p}.weight")).unwrap().shape().to_vec();
                m.set_param(&format!("blocks.{k}.{p}.weight"), Tensor::zeros(&w)).unwrap();
                m.set_param(&format!("blocks.{k}.{p}.bias"), Tensor::zeros(&[16])).unwrap();
            }
        }
        let mut cfg = zero_block.config().clone();
        cfg.blocks = 0;
        let params = zero_block
            .params()
            .iter()
            .filter(|(k, _)| !k.starts_with("blocks."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let bare = Model::from_parameters(cfg, params).unwrap();
        for seed in 0..5 {
            let input = image(200 + seed);
            assert_eq!(m.logits(&input).unwrap(), bare.logits(&input).unwrap());
        }
    }

    #[test]
    fn cls_isolated_when_attention_is_blind() {
        let mut m = image_model(16);
        for k in 0..2 {
            for p in ["q", "k", "v"] {
                m.set_param(&format!("blocks.{k}.attn.{p}.weight"), Tensor::zeros(&[16, 16])).unwrap();
            }
        }
        let ModelInput::Image(img) = image(17) else { unreachable!() };
        // swap the top-left and bottom-right 4×4 patches
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                swapped.set(&[y, x], img.get(&[y + 4, x + 4]));
                swapped.set(&[y + 4, x + 4], img.get(&[y, x]));
            }
        }
        let a = m.logits(&ModelInput::Image(img)).unwrap();
        let b = m.logits(&ModelInput::Image(swapped)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = image_model(18);
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let input = image(19);
        assert_eq!(back.logits(&input).unwrap(), m.logits(&input).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    #[test]
    fn json_errors_are_named() {
        let m = image_model(20);
        let text = m.to_json().unwrap();
        assert!(matches!(Model::from_json(&text[..text.len() / 2]), Err(Error::Parse(_))));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["format_version"] = "2".into();
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::FormatVersion { .. })));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["parameters"].as_object_mut().unwrap().remove("head.bias");
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::MissingTensor(n)) if n == "head.bias"));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["parameters"]["head.bias"] = serde_json::json!({"shape": [3], "values": [0.0, 0.0, 0.0]});
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::TensorShape { .. })));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::Parse(_))));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["parameters"]["head.bias"] = serde_json::json!({"shape": [2], "values": [0.0]});
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::Parse(_))));
    }

    #[test]
    fn hand_written_model_loads_and_classifies() {
        // d = 2 (one head of 2), one block, 2×2 image with 2×2 patches → s = 2.
        let text = r#"{
          "format_version": "1",
          "config": {
            "input": {"modality": "image", "height": 2, "width": 2, "patch_size": 2},
            "seq_len": 2, "embed_dim": 2, "heads": 1, "head_dim": 2, "blocks": 1,
            "classes": 2, "mlp_dim": 1, "layer_norm_eps": 1e-5
          },
          "parameters": {
            "embed.patch.weight": {"shape": [4, 2], "values": [[1, 0], [0, 1], [1, 0], [0, 1]]},
            "embed.patch.bias": {"shape": [2], "values": [0, 0]},
            "embed.cls": {"shape": [1, 2], "values": [[0, 0]]},
            "embed.pos": {"shape": [2, 2], "values": [[0, 0], [0, 0]]},
            "blocks.0.ln1.gamma": {"shape": [2], "values": [1, 1]},
            "blocks.0.ln1.beta": {"shape": [2], "values": [0, 0]},
            "blocks.0.ln2.gamma": {"shape": [2], "values": [1, 1]},
            "blocks.0.ln2.beta": {"shape": [2], "values": [0, 0]},
            "blocks.0.attn.q.weight": {"shape": [2, 2], "values": [[0, 0], [0, 0]]},
            "blocks.0.attn.q.bias": {"shape": [2], "values": [0, 0]},
            "blocks.0.attn.k.weight": {"shape": [2, 2], "values": [[0, 0], [0, 0]]},
            "blocks.0.attn.k.bias": {"shape": [2], "values": [0, 0]},
            "blocks.0.attn.v.weight": {"shape": [2, 2], "values": [[1, 0], [0, 1]]},
            "blocks.0.attn.v.bias": {"shape": [2], "values": [0, 0]},
            "blocks.0.attn.out.weight": {"shape": [2, 2], "values": [[1, 0], [0, 1]]},
            "blocks.0.attn.out.bias": {"shape": [2], "values": [0, 0]},
            "blocks.0.mlp.fc1.weight": {"shape": [2, 1], "values": [[0], [0]]},
            "blocks.0.mlp.fc1.bias": {"shape": [1], "values": [0]},
            "blocks.0.mlp.fc2.weight": {"shape": [1, 2], "values": [[0, 0]]},
            "blocks.0.mlp.fc2.bias": {"shape": [2], "values": [0, 0]},
            "norm.gamma": {"shape": [2], "values": [1, 1]},
            "norm.beta": {"shape": [2], "values": [0, 0]},
            "head.weight": {"shape": [2, 2], "values": [[1, -1], [-1, 1]]},
            "head.bias": {"shape": [2], "values": [0, 0]}
          }
        }"#;
        let m = Model::from_json(text).unwrap();
        // Image [[1,0],[1,0]] embeds to patch row [2, 0]. LN1 maps it to
        // c·[1, -1] with c = 1/√(1+ε) and CLS to zero; uniform attention
        // adds c·[.5, -.5] to CLS; the final norm divides by √(c²/4 + ε).
        let img = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let logits = m.logits(&ModelInput::Image(img)).unwrap();
        let eps = 1e-5f64;
        let c = 1.0 / (1.0 + eps).sqrt();
        let expected = 2.0 * (0.5 * c) / (0.25 * c * c + eps).sqrt();
        assert!((logits.data()[0] - expected).abs() < 1e-12);
        assert!((logits.data()[1] + expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_exact_for_linear_functions() {
        let w = [0.3, -1.2, 2.5, 0.7];
        let point = [1.0, 2.0, -0.5, 0.25];
        let err = gradient_check(&point, &w, &[0, 1, 2, 3], 1e-5, |p| Ok(p.iter().zip(&w).map(|(a, b)| a * b).sum())).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn finite_differences_agree_on_micro_transformer() {
        let m = Model::random(ModelConfig::image(8, 8, 4, 2), 21).unwrap();
        let err = finite_diff_check(&m, &image(22), 1, 1e-5, 100, 7).unwrap();
        assert!(err < 1e-4, "{err}");
        let coarse = finite_diff_check(&m, &image(22), 1, 1e-1, 100, 7).unwrap();
        assert!(coarse >= 10.0 * err, "{coarse} vs {err}");
        assert!(finite_diff_check(&m, &image(22), 1, 0.5, 10, 7).is_err());
    }

    #[test]
    fn finite_differences_agree_on_text_model() {
        let m = Model::random(ModelConfig::text(12, 8, 3), 23).unwrap();
        let err = finite_diff_check(&m, &ModelInput::Tokens(vec![2, 5, 1, 11, 3]), 2, 1e-5, 100, 8).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
