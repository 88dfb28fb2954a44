//! Adaptive graph convolutional network for skeleton-based action
//! recognition, self-contained and verifiable at desk scale.
//!
//! The crate is organized as:
//!
//! - [`tensor`] / [`tape`] — dense tensors and reverse-mode automatic
//!   differentiation, generic over `f32`/`f64`;
//! - [`graph`] — skeleton specs, neighbor partitioning, and adjacency
//!   normalization;
//! - [`model`] — the adaptive (A+B+C) and baseline spatial graph
//!   convolutions, the block, and the 9-block network;
//! - [`data`] — the sample container, joint→bone derivation, padding,
//!   augmentation, and a deterministic synthetic dataset generator;
//! - [`train`] — SGD with Nesterov momentum, cross-entropy, milestone
//!   schedules, the training/eval loops, and two-stream score fusion;
//! - [`verify`] — brute-force loop oracles and the finite-difference
//!   gradient checker that gate the fast paths;
//! - [`export`] — learned-adjacency extraction and PGM rendering.

pub mod data;
pub mod error;
pub mod export;
pub mod graph;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{BnStats, Gradients, Phase, Tape, Var};
pub use tensor::{Precision, Real, Tensor};
