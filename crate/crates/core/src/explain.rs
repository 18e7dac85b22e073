//! Gradient-weighted attention relevance and the comparison explainers.
//!
//! Blocks are numbered from the output side: block 1 is the last one
//! executed. Every method ends in a score per content token (CLS dropped),
//! which image models additionally upsample to a pixel map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::relevance::{propagate_network, RelevancePass, RuleSet};
use crate::tape::{backward, Gradients, Tape};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    OursNoGrad,
    OursBlockLast,
    OursBlockFirst,
    Rollout,
    RawAttention,
    GradcamAttn,
    PartialLrp,
    FullLrp,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Ours,
        Method::OursNoGrad,
        Method::OursBlockLast,
        Method::OursBlockFirst,
        Method::Rollout,
        Method::RawAttention,
        Method::GradcamAttn,
        Method::PartialLrp,
        Method::FullLrp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoGrad => "ours_no_grad",
            Method::OursBlockLast => "ours_block_last",
            Method::OursBlockFirst => "ours_block_first",
            Method::Rollout => "rollout",
            Method::RawAttention => "raw_attention",
            Method::GradcamAttn => "gradcam_attn",
            Method::PartialLrp => "partial_lrp",
            Method::FullLrp => "full_lrp",
        }
    }

    /// Methods whose output does not depend on the target class.
    pub fn is_class_agnostic(self) -> bool {
        matches!(self, Method::Rollout | Method::RawAttention)
    }

    fn needs_gradients(self) -> bool {
        matches!(self, Method::Ours | Method::OursBlockLast | Method::OursBlockFirst | Method::GradcamAttn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub method: Method,
    pub target_class: usize,
    /// One score per content token.
    pub token_scores: Tensor,
    /// Patch grid the scores were reshaped to, for image models.
    pub grid: Option<(usize, usize)>,
    pub pixel_map: Option<Tensor>,
}

impl RelevanceMap {
    /// Map used for pixel-level protocols: the upsampled map for images,
    /// the token scores otherwise.
    pub fn dense(&self) -> &Tensor {
        self.pixel_map.as_ref().unwrap_or(&self.token_scores)
    }
}

/// Reshapes content-token scores to the patch grid and resizes to `out`
/// with corner-aligned bilinear sampling.
pub fn cls_row_to_map(scores: &Tensor, grid: (usize, usize), out: (usize, usize)) -> Result<Tensor> {
    let (gh, gw) = grid;
    let (h, w) = out;
    if gh * gw != scores.len() || gh == 0 || gw == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} scores do not fill a {gh}×{gw} grid",
            scores.len()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let s = scores.data();
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut outv = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, gw);
            let top = s[y0 * gw + x0] * (1.0 - fx) + s[y0 * gw + x1] * fx;
            let bottom = s[y1 * gw + x0] * (1.0 - fx) + s[y1 * gw + x1] * fx;
            outv.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![h, w], outv)
}

/// `I + mean_h(G ⊙ R)⁺` for one block. With `clamp` off the negative
/// products are kept.
pub fn weighted_attention(grad: &Tensor, rel: &Tensor, clamp: bool) -> Result<Tensor> {
    let prod = grad.zip_map(rel, "weighted_attention", |g, r| {
        let v = g * r;
        if clamp {
            v.max(0.0)
        } else {
            v
        }
    })?;
    with_identity(prod.mean_leading())
}

fn with_identity(mut m: Tensor) -> Result<Tensor> {
    let n = m.rows();
    if m.rank() != 2 || m.last_dim() != n {
        return Err(Error::InvalidShape {
            shape: m.shape().to_vec(),
            reason: "expected a square matrix".into(),
        });
    }
    for i in 0..n {
        m.data_mut()[i * n + i] += 1.0;
    }
    Ok(m)
}

/// `M⁽¹⁾·M⁽²⁾·…·M⁽ᴮ⁾`, with `mats[0]` the block closest to the output.
pub fn chain_product(mats: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = mats.split_first().ok_or(Error::NoAttentionBlocks)?;
    rest.iter().try_fold(first.clone(), |acc, m| matmul(&acc, m))
}

/// CLS row without its self entry.
fn cls_row(m: &Tensor) -> Tensor {
    Tensor::from_vec(m.row(0)[1..].to_vec())
}

/// Everything the explainers share for one (input, class) pair, computed on demand.
/// Gradients and relevance passes are computed on first use.
pub struct Analysis<'a> {
    model: &'a Model,
    tape: Tape,
    target: usize,
    grads: Option<Gradients>,
    positive: Option<RelevancePass>,
    classic: Option<RelevancePass>,
}

impl<'a> Analysis<'a> {
    /// Runs the forward pass. `target` defaults to the predicted class.
    pub fn new(model: &'a Model, input: &ModelInput, target: Option<usize>) -> Result<Self> {
        let (logits, tape) = model.classify(input)?;
        let classes = logits.len();
        let target = target.unwrap_or_else(|| logits.argmax());
        if target >= classes {
            return Err(Error::ClassOutOfRange { index: target, classes });
        }
        Ok(Analysis {
            model,
            tape,
            target,
            grads: None,
            positive: None,
            classic: None,
        })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn gradients(&mut self) -> Result<&Gradients> {
        if self.grads.is_none() {
            self.grads = Some(backward(&self.tape, self.target)?);
        }
        Ok(self.grads.as_ref().expect("just set"))
    }

    /// Relevance under the positive-subset rules with binary normalization.
    pub fn relevance(&mut self) -> Result<&RelevancePass> {
        if self.positive.is_none() {
            self.positive = Some(propagate_network(&self.tape, self.target, &RuleSet::default())?);
        }
        Ok(self.positive.as_ref().expect("just set"))
    }

    /// Relevance under classic LRP rules.
    pub fn classic_relevance(&mut self) -> Result<&RelevancePass> {
        if self.classic.is_none() {
            self.classic = Some(propagate_network(&self.tape, self.target, &RuleSet::classic_lrp())?);
        }
        Ok(self.classic.as_ref().expect("just set"))
    }

    fn blocks(&self) -> Result<usize> {
        match self.tape.num_blocks() {
            0 => Err(Error::NoAttentionBlocks),
            b => Ok(b),
        }
    }

    fn attention(&self, block: usize) -> Result<&Tensor> {
        self.tape.attention_map(block).ok_or(Error::NoAttentionBlocks)
    }

    pub fn attention_gradient(&mut self, block: usize) -> Result<Tensor> {
        let shape = self.attention(block)?.shape().to_vec();
        self.gradients()?;
        let g = self.grads.as_ref().expect("computed above");
        Ok(g.attention(&self.tape, block).cloned().unwrap_or_else(|| Tensor::zeros(&shape)))
    }

    fn attention_relevance(&mut self, block: usize, classic: bool) -> Result<Tensor> {
        let shape = self.attention(block)?.shape().to_vec();
        let pass = if classic { self.classic_relevance()? } else { self.relevance()? };
        Ok(pass.attention(block).cloned().unwrap_or_else(|| Tensor::zeros(&shape)))
    }

    /// `Ā⁽ᵇ⁾` for every block, block 1 first. `use_grad = false` replaces
    /// the gradient by ones.
    pub fn weighted_attentions(&mut self, use_grad: bool, clamp: bool) -> Result<Vec<Tensor>> {
        let blocks = self.blocks()?;
        (1..=blocks)
            .map(|b| {
                let r = self.attention_relevance(b, false)?;
                let g = if use_grad {
                    self.attention_gradient(b)?
                } else {
                    Tensor::ones(r.shape())
                };
                weighted_attention(&g, &r, clamp)
            })
            .collect()
    }

    /// Content-token scores for `method`.
    pub fn token_scores(&mut self, method: Method) -> Result<Tensor> {
        if method.needs_gradients() {
            self.gradients()?;
        }
        match method {
            Method::Ours => Ok(cls_row(&chain_product(&self.weighted_attentions(true, true)?)?)),
            Method::OursNoGrad => Ok(cls_row(&chain_product(&self.weighted_attentions(false, true)?)?)),
            Method::OursBlockLast | Method::OursBlockFirst => {
                let b = if method == Method::OursBlockLast { 1 } else { self.blocks()? };
                let g = self.attention_gradient(b)?;
                let r = self.attention_relevance(b, false)?;
                Ok(cls_row(&weighted_attention(&g, &r, true)?))
            }
            Method::Rollout => {
                let blocks = self.blocks()?;
                let mats = (1..=blocks)
                    .map(|b| with_identity(self.attention(b)?.mean_leading()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(cls_row(&chain_product(&mats)?))
            }
            Method::RawAttention => {
                self.blocks()?;
                Ok(cls_row(&self.attention(1)?.mean_leading()))
            }
            Method::GradcamAttn => {
                self.blocks()?;
                let a = self.attention(1)?.clone();
                let g = self.attention_gradient(1)?;
                Ok(gradcam(&a, &g))
            }
            Method::PartialLrp => {
                self.blocks()?;
                Ok(cls_row(&self.attention_relevance(1, true)?.mean_leading()))
            }
            Method::FullLrp => {
                let emb = self
                    .classic_relevance()?
                    .embedding()
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument("relevance did not reach the embedding".into()))?;
                Ok(Tensor::from_vec((1..emb.rows()).map(|j| emb.row(j).iter().sum()).collect()))
            }
        }
    }

    pub fn explain(&mut self, method: Method) -> Result<RelevanceMap> {
        let token_scores = self.token_scores(method)?;
        let config = self.model.config();
        let grid = config.grid();
        let pixel_map = match (grid, config.image_size()) {
            (Some(g), Some(size)) => Some(cls_row_to_map(&token_scores, g, size)?),
            _ => None,
        };
        Ok(RelevanceMap {
            method,
            target_class: self.target,
            token_scores,
            grid,
            pixel_map,
        })
    }
}

/// GradCAM on the last attention map: CLS row of each head as a channel,
/// weighted by the mean gradient over that row, summed, clamped at zero.
pub fn gradcam(attention: &Tensor, grad: &Tensor) -> Tensor {
    let (heads, s) = (attention.shape()[0], attention.shape()[1]);
    let mut out = vec![0.0; s - 1];
    for h in 0..heads {
        let base = h * s * s;
        let g = &grad.data()[base + 1..base + s];
        let weight = g.iter().sum::<f64>() / (s - 1) as f64;
        let a = &attention.data()[base + 1..base + s];
        for (o, &v) in out.iter_mut().zip(a) {
            *o += weight * v;
        }
    }
    Tensor::from_vec(out.into_iter().map(|v| v.max(0.0)).collect())
}

/// One-shot explanation of `input` for class `target` (predicted class
/// when `None`).
pub fn explain(model: &Model, input: &ModelInput, method: Method, target: Option<usize>) -> Result<RelevanceMap> {
    Analysis::new(model, input, target)?.explain(method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, blocks: usize) -> (Model, ModelInput) {
        let m = Model::random(ModelConfig::image(8, 8, 4, 3).with_blocks(blocks), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let img = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0));
        (m, ModelInput::Image(img))
    }

    fn dense_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let n = a.rows();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += a.get(&[i, k]) * b.get(&[k, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    fn bar(g: &Tensor, r: &Tensor) -> Tensor {
        let (h, s) = (g.shape()[0], g.shape()[1]);
        Tensor::from_fn(&[s, s], |idx| {
            let (i, j) = (idx / s, idx % s);
            let mut acc = 0.0;
            for head in 0..h {
                acc += (g.get(&[head, i, j]) * r.get(&[head, i, j])).max(0.0);
            }
            acc / h as f64 + if i == j { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn ours_equals_dense_product_oracle() {
        for seed in 0..5 {
            let (m, input) = setup(seed, 2);
            let mut an = Analysis::new(&m, &input, Some(1)).unwrap();
            let scores = an.token_scores(Method::Ours).unwrap();
            let g1 = an.attention_gradient(1).unwrap();
            let g2 = an.attention_gradient(2).unwrap();
            let r1 = an.relevance().unwrap().attention(1).unwrap().clone();
            let r2 = an.relevance().unwrap().attention(2).unwrap().clone();
            let c = dense_matmul(&bar(&g1, &r1), &bar(&g2, &r2));
            for (a, b) in scores.data().iter().zip(&c.row(0)[1..]) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_block_ours_is_clamped_cls_row() {
        let (m, input) = setup(7, 1);
        let mut an = Analysis::new(&m, &input, Some(0)).unwrap();
        let scores = an.token_scores(Method::Ours).unwrap();
        let g = an.attention_gradient(1).unwrap();
        let r = an.relevance().unwrap().attention(1).unwrap().clone();
        let oracle = bar(&g, &r);
        assert_eq!(scores.data(), &oracle.row(0)[1..]);
        assert_eq!(scores, an.token_scores(Method::OursBlockLast).unwrap());
        assert_eq!(scores, an.token_scores(Method::OursBlockFirst).unwrap());
    }

    #[test]
    fn clamp_kills_nonpositive_products() {
        let g = Tensor::full(&[2, 3, 3], -1.0);
        let r = Tensor::full(&[2, 3, 3], 0.5);
        let a = weighted_attention(&g, &r, true).unwrap();
        assert_eq!(a, Tensor::eye(3));
        let c = chain_product(&[a.clone(), a]).unwrap();
        assert_eq!(cls_row(&c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn weighted_attention_is_nonnegative_with_unit_diagonal() {
        for seed in 0..10 {
            let (m, input) = setup(seed, 2);
            let mut an = Analysis::new(&m, &input, None).unwrap();
            for a in an.weighted_attentions(true, true).unwrap() {
                assert!(a.data().iter().all(|&v| v >= 0.0));
                for i in 0..a.rows() {
                    assert!(a.get(&[i, i]) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn no_grad_variant_equals_all_ones_gradient() {
        for seed in 0..5 {
            let (m, input) = setup(seed, 2);
            let mut an = Analysis::new(&m, &input, Some(2)).unwrap();
            let scores = an.token_scores(Method::OursNoGrad).unwrap();
            let mats = (1..=2)
                .map(|b| {
                    let r = an.relevance().unwrap().attention(b).unwrap().clone();
                    weighted_attention(&Tensor::ones(r.shape()), &r, true).unwrap()
                })
                .collect::<Vec<_>>();
            assert_eq!(scores, cls_row(&chain_product(&mats).unwrap()));
        }
    }

    #[test]
    fn removing_the_clamp_yields_negative_entries() {
        let found = (0..100).any(|seed| {
            let (m, input) = setup(seed, 2);
            let mut an = Analysis::new(&m, &input, None).unwrap();
            let c = chain_product(&an.weighted_attentions(true, false).unwrap()).unwrap();
            c.data().iter().any(|&v| v < 0.0)
        });
        assert!(found);
    }

    #[test]
    fn class_agnostic_methods_are_bit_identical() {
        for seed in 0..5 {
            let (m, input) = setup(seed, 2);
            for method in [Method::Rollout, Method::RawAttention] {
                let a = explain(&m, &input, method, Some(0)).unwrap();
                for t in 1..3 {
                    let b = explain(&m, &input, method, Some(t)).unwrap();
                    assert_eq!(a.token_scores.data(), b.token_scores.data());
                    assert_eq!(a.pixel_map, b.pixel_map);
                }
            }
        }
    }

    #[test]
    fn rollout_single_block_example() {
        let a = Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let r = with_identity(a.mean_leading()).unwrap();
        assert_eq!(r.data(), &[1.5, 0.5, 0.5, 1.5]);
    }

    #[test]
    fn rollout_and_raw_attention_match_tape_slices() {
        let (m, input) = setup(11, 2);
        let mut an = Analysis::new(&m, &input, None).unwrap();
        let a1 = an.tape().attention_map(1).unwrap().mean_leading();
        let a2 = an.tape().attention_map(2).unwrap().mean_leading();
        let oracle = dense_matmul(&with_identity(a1.clone()).unwrap(), &with_identity(a2).unwrap());
        let rollout = an.token_scores(Method::Rollout).unwrap();
        for (x, y) in rollout.data().iter().zip(&oracle.row(0)[1..]) {
            assert!((x - y).abs() < 1e-12);
        }
        let raw = an.token_scores(Method::RawAttention).unwrap();
        assert_eq!(raw.data(), &a1.row(0)[1..]);
        assert!(raw.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gradcam_closed_forms() {
        let a = Tensor::new(vec![1, 3, 3], vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4]).unwrap();
        assert_eq!(gradcam(&a, &Tensor::zeros(&[1, 3, 3])).data(), &[0.0, 0.0]);
        let g = Tensor::new(vec![1, 3, 3], vec![9.0, 1.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        // mean gradient over the CLS row without the CLS column is 2
        assert_eq!(gradcam(&a, &g).data(), &[1.0, 0.6]);
        assert_eq!(gradcam(&a, &g.scale(-1.0)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn partial_lrp_reads_classic_attention_relevance() {
        let (m, input) = setup(12, 1);
        let mut an = Analysis::new(&m, &input, Some(1)).unwrap();
        let scores = an.token_scores(Method::PartialLrp).unwrap();
        let (_, tape) = m.classify(&input).unwrap();
        let pass = propagate_network(&tape, 1, &RuleSet::classic_lrp()).unwrap();
        let r = pass.attention(1).unwrap().mean_leading();
        assert_eq!(scores.data(), &r.row(0)[1..]);
    }

    #[test]
    fn full_lrp_is_content_rows_of_embedding_relevance() {
        let (m, input) = setup(13, 2);
        let mut an = Analysis::new(&m, &input, Some(0)).unwrap();
        let scores = an.token_scores(Method::FullLrp).unwrap();
        let emb = an.classic_relevance().unwrap().embedding().unwrap().clone();
        for (j, s) in scores.data().iter().enumerate() {
            assert_eq!(*s, emb.row(j + 1).iter().sum::<f64>());
        }
        // with conserving rules the embedding relevance sums to one
        let total = an.relevance().unwrap().embedding().unwrap().sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn identical_tokens_share_relevance_equally() {
        let (mut m, _) = setup(14, 2);
        m.set_param("embed.pos", Tensor::zeros(&[5, 16])).unwrap();
        let input = ModelInput::Image(Tensor::zeros(&[8, 8]));
        let scores = explain(&m, &input, Method::FullLrp, Some(0)).unwrap().token_scores;
        for v in scores.data() {
            assert!((v - scores.data()[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn class_out_of_range_and_blockless_models_error() {
        let (m, input) = setup(15, 2);
        assert!(matches!(explain(&m, &input, Method::Ours, Some(3)), Err(Error::ClassOutOfRange { .. })));
        let (m0, input0) = setup(16, 0);
        assert!(matches!(explain(&m0, &input0, Method::Rollout, None), Err(Error::NoAttentionBlocks)));
        assert!(explain(&m0, &input0, Method::FullLrp, None).is_ok());
    }

    #[test]
    fn pixel_maps_present_for_images_only() {
        let (m, input) = setup(17, 2);
        for method in Method::ALL {
            let map = explain(&m, &input, method, Some(0)).unwrap();
            assert_eq!(map.token_scores.len(), 4);
            assert_eq!(map.pixel_map.as_ref().unwrap().shape(), &[8, 8]);
            assert!(map.dense().is_finite());
        }
        let t = Model::random(ModelConfig::text(12, 8, 2), 1).unwrap();
        let map = explain(&t, &ModelInput::Tokens(vec![3, 4, 5]), Method::Ours, None).unwrap();
        assert!(map.pixel_map.is_none());
        assert_eq!(map.token_scores.len(), 3);
    }

    #[test]
    fn upsampling_examples() {
        let c = cls_row_to_map(&Tensor::full(&[4], 0.3), (2, 2), (5, 7)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.3));
        let s = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(cls_row_to_map(&s, (2, 2), (2, 2)).unwrap().data(), s.data());
        assert!(cls_row_to_map(&s, (3, 2), (4, 4)).is_err());

        // independent oracle: corner-aligned bilinear formula
        let s = Tensor::from_vec(vec![0.1, 0.7, -0.4, 2.0]);
        let up = cls_row_to_map(&s, (2, 2), (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let (u, v) = (y as f64 / 3.0, x as f64 / 3.0);
                let want = 0.1 * (1.0 - u) * (1.0 - v) + 0.7 * (1.0 - u) * v + -0.4 * u * (1.0 - v) + 2.0 * u * v;
                assert!((up.get(&[y, x]) - want).abs() < 1e-9);
            }
        }
    }
}
