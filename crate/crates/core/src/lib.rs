//! Extreme-compression toolkit for tiny transformer encoders.
//!
//! The pipeline: quantization-aware training with binary/ternary weights and
//! straight-through gradients, single- and multi-stage layerwise knowledge
//! distillation, budgeted training schedules, lightweight layer reduction,
//! low-rank residual adapters, and bit-packed model serialization — all
//! exercised end-to-end on synthetic classification tasks.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod quant;
pub mod schedule;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
