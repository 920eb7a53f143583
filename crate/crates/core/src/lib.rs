//! Domain-conditioned vision transformer with fully test-time adaptation.
//!
//! The crate bundles a small dense-tensor autodiff core, a ViT whose
//! self-attention can be augmented with learned domain-conditioner vectors,
//! an online entropy-driven adaptation loop with sharpness-aware updates, a
//! synthetic corruption benchmark, and attention analytics.

pub mod adaptation;
pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod conditioners;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod tensor;

pub use error::{DctError, DctResult};
pub use tensor::Tensor;
