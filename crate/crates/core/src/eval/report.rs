//! Runs the protocols for a list of map sources and serializes the result.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::data::SyntheticDataset;
use crate::eval::metrics::{
    perturbation_suite, segmentation_eval, token_f1_eval, ClassMode, MapSource, PerturbationResult, Polarity,
    SegmentationScores, TokenF1Result, TOKEN_F1_KS,
};
use crate::eval::train::accuracy;
use crate::model::{Modality, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub perturbation: Vec<PerturbationResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_f1: Option<TokenF1Result>,
}

impl MethodReport {
    pub fn auc(&self, polarity: Polarity, class_mode: ClassMode) -> Option<f64> {
        self.perturbation
            .iter()
            .find(|p| p.polarity == polarity && p.class_mode == class_mode)
            .map(|p| p.auc)
    }

    /// `(negative AUC − positive AUC) + mAP + mIoU` under target-class maps.
    /// Higher is better on every term.
    pub fn composite(&self) -> Option<f64> {
        let pos = self.auc(Polarity::Positive, ClassMode::Target)?;
        let neg = self.auc(Polarity::Negative, ClassMode::Target)?;
        let seg = self.segmentation?;
        Some(neg - pos + seg.m_ap + seg.m_iou)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub dataset_seed: u64,
    pub items: usize,
    pub modality: Modality,
    pub config: ModelConfig,
    pub model_accuracy: f64,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Long-format table: one metric value per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,protocol,polarity,class_mode,metric,value\n");
        for m in &self.methods {
            for p in &m.perturbation {
                let (pol, mode) = (p.polarity.as_str(), p.class_mode.as_str());
                for (f, a) in p.fractions.iter().zip(&p.accuracy_at_fraction) {
                    let _ = writeln!(out, "{},perturbation,{pol},{mode},accuracy@{f},{a}", m.method);
                }
                let _ = writeln!(out, "{},perturbation,{pol},{mode},auc,{}", m.method, p.auc);
            }
            if let Some(s) = &m.segmentation {
                for (name, v) in [("pixel_accuracy", s.pixel_accuracy), ("mAP", s.m_ap), ("mIoU", s.m_iou)] {
                    let _ = writeln!(out, "{},segmentation,,target,{name},{v}", m.method);
                }
            }
            if let Some(t) = &m.token_f1 {
                for (k, f) in t.k.iter().zip(&t.f1) {
                    let _ = writeln!(out, "{},token_f1,,target,f1@{k},{f}", m.method);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    pub polarities: Vec<Polarity>,
    pub class_modes: Vec<ClassMode>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            polarities: vec![Polarity::Positive, Polarity::Negative],
            class_modes: vec![ClassMode::Predicted, ClassMode::Target],
        }
    }
}

/// Runs perturbation and segmentation (images) or token-F1 (text) for
/// every source, in the order given.
pub fn evaluate(model: &Model, dataset: &SyntheticDataset, sources: &[&dyn MapSource], options: &EvalOptions) -> Result<EvalReport> {
    let modality = model.config().modality();
    let mut methods = Vec::with_capacity(sources.len());
    for &source in sources {
        let report = match modality {
            Modality::Image => MethodReport {
                method: source.name(),
                perturbation: perturbation_suite(model, dataset, source, &options.polarities, &options.class_modes)?,
                segmentation: Some(segmentation_eval(model, dataset, source)?),
                token_f1: None,
            },
            Modality::Text => MethodReport {
                method: source.name(),
                perturbation: Vec::new(),
                segmentation: None,
                token_f1: Some(token_f1_eval(model, dataset, source, &TOKEN_F1_KS)?),
            },
        };
        methods.push(report);
    }
    Ok(EvalReport {
        seed: options.seed,
        dataset_seed: dataset.seed,
        items: dataset.len(),
        modality,
        config: model.config().clone(),
        model_accuracy: accuracy(model, &dataset.items)?,
        methods,
    })
}
