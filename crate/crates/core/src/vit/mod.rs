//! Vision transformer: patch/position embeddings, class token, pre-norm
//! encoder blocks, and a linear head over the class token.
//!
//! Tokens are stored one per row, so a sequence is an `(l+1) × d` matrix
//! and every linear layer computes `x · Wᵀ + b` with `W` shaped `out × in`.

mod config;
mod model;

pub use config::{ParamBreakdown, ViTConfig};
pub use model::{
    attention_block, parameter_layout, patch_embed, patch_embed_tensor, patchify, AdapterVars,
    BlockVars, BoundParams, FloatImage, ViTModel, LAYER_NORM_EPS,
};
