//! Metrics behind the evaluation protocols.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::data::{Item, SyntheticDataset};
use crate::explain::{Analysis, Method};
use crate::model::{Model, ModelInput};
use crate::tensor::Tensor;

/// Masking fractions of the perturbation protocol.
pub const FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Token-F1 budgets.
pub const TOKEN_F1_KS: [usize; 8] = [10, 20, 30, 40, 50, 60, 70, 80];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Highest relevance removed first.
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassMode {
    Predicted,
    Target,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

impl ClassMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassMode::Predicted => "predicted",
            ClassMode::Target => "target",
        }
    }
}

/// Anything that yields a dense relevance map for an item and class.
pub trait MapSource: Sync {
    fn name(&self) -> String;

    /// Map with the same shape as the item's input.
    fn map(&self, model: &Model, index: usize, item: &Item, class: usize) -> Result<Tensor>;
}

impl MapSource for Method {
    fn name(&self) -> String {
        self.as_str().to_string()
    }

    fn map(&self, model: &Model, _index: usize, item: &Item, class: usize) -> Result<Tensor> {
        Ok(Analysis::new(model, &item.input, Some(class))?.explain(*self)?.dense().clone())
    }
}

/// Uniform noise, independent of model and class.
#[derive(Debug, Clone, Copy)]
pub struct RandomMaps {
    pub seed: u64,
}

impl MapSource for RandomMaps {
    fn name(&self) -> String {
        "random".into()
    }

    fn map(&self, model: &Model, index: usize, item: &Item, _class: usize) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ index as u64);
        let shape = match &item.input {
            ModelInput::Image(img) => img.shape().to_vec(),
            ModelInput::Tokens(ids) => vec![ids.len()],
        };
        let _ = model;
        Ok(Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0)))
    }
}

/// The ground-truth mask of the requested class (zeros when absent).
#[derive(Debug, Clone, Copy)]
pub struct OracleMaps;

impl MapSource for OracleMaps {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn map(&self, _model: &Model, _index: usize, item: &Item, class: usize) -> Result<Tensor> {
        match (&item.input, item.mask(class)) {
            (_, Some(m)) => Ok(m.clone()),
            (ModelInput::Image(img), None) => Ok(Tensor::zeros(img.shape())),
            (ModelInput::Tokens(ids), None) => {
                let mut t = Tensor::zeros(&[ids.len()]);
                for &g in &item.gold_tokens {
                    t.data_mut()[g] = 1.0;
                }
                Ok(t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub method: String,
    pub polarity: Polarity,
    pub class_mode: ClassMode,
    pub fractions: Vec<f64>,
    pub accuracy_at_fraction: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area under `ys` sampled at `xs`, divided by the x span.
pub fn normalized_auc(xs: &[f64], ys: &[f64]) -> f64 {
    let span = xs[xs.len() - 1] - xs[0];
    let area: f64 = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
    area / span
}

/// Pixel indices ordered for removal; ties go to the lower index.
pub fn removal_order(map: &Tensor, polarity: Polarity) -> Vec<usize> {
    let v = map.data();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    match polarity {
        Polarity::Positive => idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b))),
        Polarity::Negative => idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b))),
    }
    idx
}

/// Number of pixels masked at fraction `f` of `n`.
pub fn masked_count(f: f64, n: usize) -> usize {
    ((f * n as f64).round() as usize).min(n)
}

pub fn perturbation_test(
    model: &Model,
    dataset: &SyntheticDataset,
    source: &dyn MapSource,
    polarity: Polarity,
    class_mode: ClassMode,
) -> Result<PerturbationResult> {
    let results = perturbation_suite(model, dataset, source, &[polarity], &[class_mode])?;
    Ok(results.into_iter().next().expect("one setting requested"))
}

/// Runs every (polarity, class mode) combination, building each item's
/// map once per distinct class.
pub fn perturbation_suite(
    model: &Model,
    dataset: &SyntheticDataset,
    source: &dyn MapSource,
    polarities: &[Polarity],
    class_modes: &[ClassMode],
) -> Result<Vec<PerturbationResult>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // hits[item][mode][polarity][fraction]
    let hits: Vec<Vec<Vec<Vec<bool>>>> = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let ModelInput::Image(img) = &item.input else {
                return Err(Error::InvalidArgument("perturbation needs image inputs".into()));
            };
            let predicted = model.predict(&item.input)?;
            class_modes
                .iter()
                .map(|mode| {
                    let class = match mode {
                        ClassMode::Predicted => predicted,
                        ClassMode::Target => item.label,
                    };
                    let map = source.map(model, index, item, class)?;
                    if map.shape() != img.shape() {
                        return Err(Error::shape("perturbation_test", map.shape(), img.shape()));
                    }
                    polarities
                        .iter()
                        .map(|&pol| {
                            let order = removal_order(&map, pol);
                            FRACTIONS
                                .iter()
                                .map(|&f| {
                                    let mut masked = img.clone();
                                    for &p in &order[..masked_count(f, order.len())] {
                                        masked.data_mut()[p] = 0.0;
                                    }
                                    Ok(model.predict(&ModelInput::Image(masked))? == item.label)
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let n = dataset.len() as f64;
    let mut out = Vec::new();
    for (mi, &class_mode) in class_modes.iter().enumerate() {
        for (pi, &polarity) in polarities.iter().enumerate() {
            let accuracy_at_fraction: Vec<f64> = (0..FRACTIONS.len())
                .map(|fi| hits.iter().filter(|h| h[mi][pi][fi]).count() as f64 / n)
                .collect();
            out.push(PerturbationResult {
                method: source.name(),
                polarity,
                class_mode,
                fractions: FRACTIONS.to_vec(),
                auc: normalized_auc(&FRACTIONS, &accuracy_at_fraction),
                accuracy_at_fraction,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub pixel_accuracy: f64,
    #[serde(rename = "mAP")]
    pub m_ap: f64,
    #[serde(rename = "mIoU")]
    pub m_iou: f64,
}

/// All-points interpolated average precision of `scores` against a
/// binary `mask`. Equal scores form one threshold.
pub fn average_precision(scores: &[f64], mask: &[f64]) -> f64 {
    let positives = mask.iter().filter(|&&m| m > 0.5).count();
    if positives == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += (mask[idx[i]] > 0.5) as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev_recall) * best;
        prev_recall = points[k].0;
    }
    ap
}

/// Thresholds each map at its own mean (strictly greater is foreground).
pub fn threshold_at_mean(map: &Tensor) -> Vec<bool> {
    let mean = map.mean();
    map.data().iter().map(|&v| v > mean).collect()
}

pub fn segmentation_metrics(maps: &[Tensor], gts: &[Tensor]) -> Result<SegmentationScores> {
    if maps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if maps.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} maps for {} masks", maps.len(), gts.len())));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    // intersection and union for background (0) and foreground (1)
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    let mut ap_sum = 0.0;
    for (map, gt) in maps.iter().zip(gts) {
        if map.shape() != gt.shape() {
            return Err(Error::shape("segmentation_metrics", map.shape(), gt.shape()));
        }
        if !gt.data().iter().any(|&m| m > 0.5) {
            return Err(Error::InvalidArgument("ground-truth mask is empty".into()));
        }
        let pred = threshold_at_mean(map);
        for (&p, &g) in pred.iter().zip(gt.data()) {
            let g = g > 0.5;
            correct += (p == g) as usize;
            total += 1;
            for (class, on) in [(0, false), (1, true)] {
                let (pc, gc) = (p == on, g == on);
                inter[class] += (pc && gc) as usize;
                union[class] += (pc || gc) as usize;
            }
        }
        ap_sum += average_precision(map.data(), gt.data());
    }
    let iou = |c: usize| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 };
    Ok(SegmentationScores {
        pixel_accuracy: correct as f64 / total as f64,
        m_ap: ap_sum / maps.len() as f64,
        m_iou: (iou(0) + iou(1)) / 2.0,
    })
}

/// Segmentation scores of `source`'s maps for each item's label against
/// the label's mask.
pub fn segmentation_eval(model: &Model, dataset: &SyntheticDataset, source: &dyn MapSource) -> Result<SegmentationScores> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs: Vec<(Tensor, Tensor)> = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let gt = item
                .mask(item.label)
                .ok_or_else(|| Error::InvalidArgument(format!("item {i} has no mask for its label")))?;
            Ok((source.map(model, i, item, item.label)?, gt.clone()))
        })
        .collect::<Result<_>>()?;
    let (maps, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    segmentation_metrics(&maps, &gts)
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn token_f1_topk(scores: &Tensor, gold: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} tokens", scores.len())));
    }
    let picked = top_k(scores.data(), k);
    let hits = picked.iter().filter(|i| gold.contains(i)).count();
    if hits == 0 {
        return Ok(0.0);
    }
    let precision = hits as f64 / k as f64;
    let recall = hits as f64 / gold.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenF1Result {
    pub method: String,
    pub k: Vec<usize>,
    pub f1: Vec<f64>,
}

/// Mean token-F1 over the dataset for each budget in `ks` that fits the
/// sequence length.
pub fn token_f1_eval(model: &Model, dataset: &SyntheticDataset, source: &dyn MapSource, ks: &[usize]) -> Result<TokenF1Result> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let min_len = dataset
        .items
        .iter()
        .map(|it| match &it.input {
            ModelInput::Tokens(ids) => ids.len(),
            ModelInput::Image(_) => 0,
        })
        .min()
        .unwrap_or(0);
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k > 0 && k <= min_len).collect();
    let per: Vec<Vec<f64>> = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let scores = source.map(model, i, item, item.label)?;
            ks.iter().map(|&k| token_f1_topk(&scores, &item.gold_tokens, k)).collect()
        })
        .collect::<Result<_>>()?;
    let n = dataset.len() as f64;
    let f1 = (0..ks.len()).map(|j| per.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    Ok(TokenF1Result {
        method: source.name(),
        k: ks,
        f1,
    })
}
