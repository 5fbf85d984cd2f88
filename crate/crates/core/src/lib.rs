//! Structured prediction with scaled potentials.
//!
//! This crate implements linear-chain conditional random fields and a binary
//! Gaussian CRF for segmentation, together with the machinery for balancing
//! unary and pairwise potential magnitudes: online grid search over a unary
//! scale during training, offline normalization of both potential families,
//! a ratio regularizer, and a temperature baseline. Training utilities
//! (optimizers, plateau scheduling, staged training, telemetry) and synthetic
//! plus on-disk data loaders round out the toolkit consumed by the CLI.

pub mod chain_crf;
pub mod check;
pub mod data;
pub mod error;
pub mod gcrf;
pub mod neural;
pub mod numerics;
pub mod scaling;
pub mod training;

pub use error::{Error, Result};
