//! Experiment runner for potential-scale training studies: trains chain
//! and grid models under the different balancing schemes, sweeps fixed
//! unary scales, evaluates checkpoints, and generates synthetic data.
//!
//! The binary in `main.rs` is a thin argument parser over the `cmd_*`
//! functions here; integration tests drive the same functions in-process.

pub mod config;
pub mod eval;
pub mod run;
pub mod selftest;
