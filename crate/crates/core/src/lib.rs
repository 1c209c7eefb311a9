//! Cross-modal metric learning between time-series and images.
//!
//! The crate trains a small recurrent-convolutional time-series classifier
//! alongside an image classifier on Gramian angular summation fields and
//! ties their latent embeddings together with contrastive or triplet
//! objectives over a menu of metric-learning distances. Negatives are mined
//! on a curriculum of decreasing label distance with a margin that scales
//! with the mined distance. CTC and edit-distance utilities cover the
//! sequence-label regime.

pub mod checkpoint;
pub mod ctc;
pub mod dml;
pub mod harness;
pub mod nn;
pub mod num;
pub mod seq_metrics;
pub mod synth;
pub mod triplet;
