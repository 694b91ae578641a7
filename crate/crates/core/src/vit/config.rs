use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CHANNELS;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
}

/// Closed-form parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub patch_embed: usize,
    pub cls_token: usize,
    pub pos_embed: usize,
    pub blocks: usize,
    pub final_norm: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.patch_embed
            + self.cls_token
            + self.pos_embed
            + self.blocks
            + self.final_norm
            + self.head
    }
}

impl ViTConfig {
    /// ViT-B/16 at 224×224.
    pub fn vit_b16(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_dim: 3072,
            num_classes,
        }
    }

    /// Desk-scale model used by the gradient check and the trend test.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_dim: 32,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patch tokens per image, `(image_size / P)²`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Length of one flattened patch, `3·P²`.
    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let d = self.embed_dim;
        let m = self.mlp_dim;
        let per_block = 2 * d // norm1
            + 4 * (d * d + d) // q, k, v, output projection
            + 2 * d // norm2
            + (d * m + m) + (m * d + d); // mlp
        ParamBreakdown {
            patch_embed: self.patch_dim() * d + d,
            cls_token: d,
            pos_embed: (self.num_patches() + 1) * d,
            blocks: self.depth * per_block,
            final_norm: 2 * d,
            head: d * self.num_classes + self.num_classes,
        }
    }
}
