use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("input does not match model config: {0}")]
    InputMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model has no attention blocks")]
    NoAttentionBlocks,

    #[error("relevance propagation failed at layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("weight file format version {found:?} is not supported (expected {expected:?})")]
    FormatVersion { found: String, expected: &'static str },

    #[error("weight file is missing parameter {0:?}")]
    MissingTensor(String),

    #[error("weight file has unexpected parameter {0:?}")]
    UnexpectedTensor(String),

    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::AtLayer { .. } => e,
            other => Error::AtLayer {
                layer,
                source: Box::new(other),
            },
        }
    }
}
