//! Token ablation analysis for vision transformers with register tokens.
//!
//! The crate runs a ViT forward pass with block-output interventions (zero,
//! mean, noise, cross-image shuffle, random patch zeroing), measures the
//! effect on downstream tasks and representation geometry, and attaches
//! bootstrap intervals and permutation-test p-values to every number.

pub mod archive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod interventions;
pub mod plots;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
