//! Scene-graph convolutional visual question answering, built on a small
//! tape-based reverse-mode differentiation core.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`tensor`] / [`tape`]: dense tensors, recorded operations, gradients.
//! - [`gradcheck`]: central finite-difference verification of every rule.
//! - [`text`]: vocabulary, word embeddings, GRU question encoding.
//! - [`relation`]: the visual relationship encoder and its alignment losses.
//! - [`graph`]: scene graphs, feature containers, synthetic scenes with an
//!   exact symbolic oracle.
//! - [`model`]: graph convolution with question-guided attention and answer
//!   prediction.
//! - [`optim`] / [`train`]: Adam/Adamax, gradient clipping, training loops,
//!   checkpoints, evaluation, attention dumps.
//!
//! Everything is deterministic under a seed; see `rng`.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod relation;
pub mod rng;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
