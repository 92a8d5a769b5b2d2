//! Multi-precision and mixed-precision quantization-aware training built on
//! Double Rounding: one shared `h`-bit integer model from which every lower
//! precision is derived by rounding right-shifts.
//!
//! Modules:
//! - [`numerics`]: tensors, manual backprop, batch norm, Adam
//! - [`quantizer`]: Double Rounding, activation quantization, STE gradients
//! - [`trainer`]: joint multi-precision training (conventional and ALRS)
//! - [`sensitivity`]: per-layer Hessian-trace profiling
//! - [`mixedprec`]: SuperNet training with stochastic bit-switching
//! - [`search`]: constrained bit allocation and Pareto fronts
//! - [`checkpoint`]: the `DRQ1` binary model format
//! - [`config`], [`pipeline`]: validated run configuration and experiment stages
//! - [`data`], [`report`]: datasets and run records

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mixedprec;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod report;
pub mod search;
pub mod sensitivity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
