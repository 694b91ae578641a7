//! Fine-tuning vision transformers on block-wise encrypted images.
//!
//! The crate is generic over the element type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below fix the common choices.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod crypto;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod lora;
pub mod params;
pub mod run;
pub mod scalar;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

/// Training precision.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ViTModel32 = vit::ViTModel<f32>;
pub type ViTModel64 = vit::ViTModel<f64>;
