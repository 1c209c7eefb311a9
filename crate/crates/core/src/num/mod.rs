//! Dense arrays, seeded randomness and the Adam optimizer.

mod adam;
mod array;
pub mod gemm;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub(crate) use array::argmax as argmax_slice;
pub use array::{elementwise, Array, ElementwiseOp};
pub use rng::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("optimizer has {expected} parameter slots, got {found}")]
    SlotCount { expected: usize, found: usize },
}
