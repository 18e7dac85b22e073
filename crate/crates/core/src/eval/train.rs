//! Gradient descent on softmax cross-entropy using the tape's parameter
//! gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::data::{Item, SyntheticDataset};
use crate::model::{Model, ModelConfig};
use crate::tape::backward_with_seed;
use crate::tensor::{softmax_lastdim, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Items per update; `None` uses the whole dataset.
    pub batch_size: Option<usize>,
    /// Heavy-ball momentum coefficient; 0 is plain SGD.
    pub momentum: f64,
    /// L2 penalty on weight matrices only.
    pub weight_decay: f64,
    pub seed: u64,
}

/// Training-set size used by the toy recipe.
pub const TOY_TRAIN_ITEMS: usize = 300;

/// Full-batch gradient descent; lr 0.1 keeps the early loss curve monotone.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.1,
            batch_size: None,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean dataset loss before training followed by one entry per epoch.
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
}

/// Loss and parameter gradients of one item.
fn item_gradient(model: &Model, item: &Item) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let (logits, tape) = model.classify(&item.input)?;
    let probs = softmax_lastdim(&logits);
    let target = item.target_distribution(probs.len());
    let loss = cross_entropy(probs.data(), &target);
    let seed: Vec<f64> = probs.data().iter().zip(&target).map(|(p, t)| p - t).collect();
    let grads = backward_with_seed(&tape, &Tensor::new(vec![1, seed.len()], seed)?)?;
    Ok((loss, grads.params(&tape)))
}

fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -t * p.max(f64::MIN_POSITIVE).ln())
        .sum()
}

/// Mean loss and accuracy of `model` on `items`. Accuracy counts only
/// items with a single correct class.
pub fn evaluate_loss(model: &Model, items: &[Item]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<(f64, Option<bool>)> = items
        .par_iter()
        .map(|item| {
            let logits = model.logits(&item.input)?;
            let p = softmax_lastdim(&logits);
            let loss = cross_entropy(p.data(), &item.target_distribution(p.len()));
            let scored = item.is_unambiguous().then_some(logits.argmax() == item.label);
            Ok((loss, scored))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / items.len() as f64;
    let scored: Vec<bool> = per.iter().filter_map(|p| p.1).collect();
    let acc = match scored.len() {
        0 => 0.0,
        n => scored.iter().filter(|&&c| c).count() as f64 / n as f64,
    };
    Ok((loss, acc))
}

pub fn accuracy(model: &Model, items: &[Item]) -> Result<f64> {
    Ok(evaluate_loss(model, items)?.1)
}

/// Trains a freshly initialized model. Per-item gradients are computed in
/// parallel and summed in item order, so the result depends only on the
/// inputs.
pub fn train_toy(config: ModelConfig, dataset: &SyntheticDataset, train: &TrainConfig) -> Result<(Model, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = Model::init(config, train.seed)?;
    train_from(model, dataset, train)
}

/// Continues training `model`.
pub fn train_from(mut model: Model, dataset: &SyntheticDataset, train: &TrainConfig) -> Result<(Model, TrainReport)> {
    let items = &dataset.items;
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&train.momentum) {
        return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", train.momentum)));
    }
    if !(train.lr >= 0.0 && train.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be finite and ≥ 0", train.lr)));
    }
    let batch = train.batch_size.unwrap_or(items.len()).clamp(1, items.len());
    // With full batches the gradient pass already yields the loss of the
    // current parameters, so no separate evaluation is needed per epoch.
    let full = batch == items.len();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::with_capacity(train.epochs + 1);
    if !full {
        losses.push(evaluate_loss(&model, items)?.0);
    }
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for epoch in 1..=train.epochs {
        if !full {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let parts: Vec<(f64, BTreeMap<String, Tensor>)> =
                chunk.par_iter().map(|&i| item_gradient(&model, &items[i])).collect::<Result<_>>()?;
            if parts.iter().any(|p| !p.0.is_finite()) {
                // in full-batch mode this is the state left by the previous epoch
                return Err(Error::Diverged {
                    epoch: if full { epoch - 1 } else { epoch },
                });
            }
            if full {
                losses.push(parts.iter().map(|p| p.0).sum::<f64>() / items.len() as f64);
            }
            let step = train.lr / chunk.len() as f64;
            for (name, param) in model.params_mut().iter_mut() {
                let mut total = vec![0.0; param.len()];
                for (_, g) in &parts {
                    if let Some(g) = g.get(name) {
                        for (t, v) in total.iter_mut().zip(g.data()) {
                            *t += v;
                        }
                    }
                }
                let decay = if name.ends_with(".weight") { train.lr * train.weight_decay } else { 0.0 };
                let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; total.len()]);
                for ((p, g), v) in param.data_mut().iter_mut().zip(&total).zip(v.iter_mut()) {
                    *v = train.momentum * *v + step * g + decay * *p;
                    *p -= *v;
                }
            }
        }
        if !model.params().values().all(Tensor::is_finite) {
            return Err(Error::Diverged { epoch });
        }
        if !full {
            let (loss, _) = evaluate_loss(&model, items)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            losses.push(loss);
        }
    }
    let (loss, final_accuracy) = evaluate_loss(&model, items)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch: train.epochs });
    }
    if full {
        losses.push(loss);
    }
    Ok((model, TrainReport { losses, final_accuracy }))
}
