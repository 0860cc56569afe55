//! Gesture recognition engine: a small reverse-mode autodiff core, the 3D-CNN,
//! LSTM and joint 3D-CNN→LSTM classifiers, knowledge distillation, magnitude
//! pruning with sparse/half-precision model files, and a synthetic
//! moving-blob gesture corpus to train them on.
//!
//! Compute runs in `f32`. Every kernel is generic over [`Scalar`] so the same
//! code path can be evaluated in `f64` for finite-difference gradient checks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checks;
mod codec;
pub mod compression;
pub mod data;
pub mod distill;
mod error;
pub mod exec;
pub mod kernels;
pub mod models;
pub mod nn;
mod scalar;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use scalar::Scalar;
pub use tensor::Tensor;
