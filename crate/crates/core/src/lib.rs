//! Gated-MLP sequence models (gMLP, aMLP and spatial-gating ablations) on a
//! small dense-tensor reverse-mode differentiation engine.
//!
//! * [`tensor`]: row-major tensors and numeric kernels
//! * [`autodiff`]: the tape, finite differences and gradient checks
//! * [`gradcheck`]: check suites over primitives, blocks and models
//! * [`layers`]: normalization, projections, spatial gating, tiny attention
//! * [`models`]: configs, presets, block assembly, parameter and MAC accounting
//! * [`training`]: AdamW, schedules, MLM masking, synthetic tasks, scaling fits
//! * [`checkpoint`]: binary parameter files

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod training;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
