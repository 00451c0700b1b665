//! Identity-preserving stylization toolkit.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the face
//! oracle, identity checks and pipeline run in `f64`. Concrete aliases for
//! the common instantiations live at the crate root.

// float guards are written as `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod diffusion;
pub mod error;
pub mod facegen;
pub mod identity;
pub mod lora;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod style;

pub use error::{Error, Result};
pub use numerics::{RngStream, Tensor};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type NoiseSchedule64 = diffusion::NoiseSchedule<f64>;
pub type NoiseSchedule32 = diffusion::NoiseSchedule<f32>;
pub type DenoiserModel64 = diffusion::DenoiserModel<f64>;
pub type DenoiserModel32 = diffusion::DenoiserModel<f32>;
pub type AttentionWeights64 = attention::AttentionWeights<f64>;
pub type AttentionWeights32 = attention::AttentionWeights<f32>;
pub type LoraAdapter64 = lora::LoraAdapter<f64>;
pub type LoraAdapter32 = lora::LoraAdapter<f32>;
pub type FeatureExtractor64 = style::FeatureExtractor<f64>;
pub type FeatureExtractor32 = style::FeatureExtractor<f32>;
