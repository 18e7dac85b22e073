//! Synthetic tasks and toy training, plus the evaluation protocols.

pub mod data;
pub mod metrics;
pub mod report;
pub mod train;

pub use data::{gen_synthetic_dataset, DatasetSpec, Item, SyntheticDataset};
pub use metrics::{
    perturbation_test, segmentation_metrics, token_f1_topk, ClassMode, MapSource, OracleMaps, PerturbationResult, Polarity,
    RandomMaps, SegmentationScores,
};
pub use report::{evaluate, EvalOptions, EvalReport, MethodReport};
pub use train::{train_toy, TrainConfig, TrainReport};
