//! Layers with exact backward passes, model stacks and the classification loss.

mod layers;
mod loss;
mod model;
mod params;

pub use layers::{Activation, LayerKind, LayerSpec, BATCHNORM_MOMENTUM, LSTM_FORGET_BIAS, NORM_EPS};
pub use loss::{batch_cross_entropy, cross_entropy, CrossEntropy, CE_CLIP};
pub(crate) use model::bin_range;
pub use model::{Embedding, EmbeddingBatch, Forward, Mode, ModelSpec, NormMode, OutputGrad, Tape};
pub use params::{Gradients, Param, ParamId, ParamStore};

use crate::num::NumError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer {0} needs a random stream in training mode")]
    MissingRng(String),
    #[error("tape recorded at parameter version {tape}, store is at {store}")]
    StaleTape { tape: u64, store: u64 },
    #[error("invalid layer {layer}: {reason}")]
    InvalidLayer { layer: String, reason: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("cache does not match layer {0}")]
    CacheMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probabilities are not a distribution")]
    NotADistribution,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[cfg(test)]
mod tests;
