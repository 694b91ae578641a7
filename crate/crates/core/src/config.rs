//! Experiment configuration file.
//!
//! ```json
//! {
//!   "vit": { "image_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 2,
//!            "num_heads": 2, "mlp_dim": 32, "num_classes": 2 },
//!   "lora": { "rank": 8, "alpha": 4.0, "targets": ["q", "v"] },
//!   "train": { "lr": 1e-4, "epochs": 5, "batch_size": 32, "seed": 0, "precision": "f32" },
//!   "preprocess": { "interpolation": "bilinear", "mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5] },
//!   "data": { "classes": [0, 1], "limit": 500, "test_limit": 200 }
//! }
//! ```
//!
//! Every section is optional; unknown keys are rejected. The encryption
//! key is never read from or written to this file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{EncryptionSpec, PreprocessSpec, Subset};
use crate::error::{Error, Result};
use crate::image::Interpolation;
use crate::lora::LoraConfig;
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Defaults to the model's `image_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_size: Option<usize>,
    pub interpolation: Interpolation,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let spec = PreprocessSpec::default();
        Self {
            target_size: None,
            interpolation: spec.interpolation,
            mean: spec.mean,
            std: spec.std,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Keep only these CIFAR-10 labels (remapped to `0..classes.len()`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vit: Option<ViTConfig>,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub data: DataConfig,
    /// Checkpoint directory with initial weights (e.g. converted pretrained ones).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Model architecture: the toy preset when `toy`, else the `vit`
    /// section, else ViT-B/16. A class filter fixes `num_classes`.
    pub fn resolve_vit(&self, toy: bool) -> Result<ViTConfig> {
        let mut vit = match (toy, self.vit) {
            (true, Some(v)) => ViTConfig::toy(v.num_classes),
            (true, None) => ViTConfig::toy(10),
            (false, Some(v)) => v,
            (false, None) => ViTConfig::vit_b16(10),
        };
        if let Some(classes) = &self.data.classes {
            if classes.is_empty() || classes.iter().any(|&c| c >= 10) {
                return Err(Error::Config(format!("invalid class list {classes:?}")));
            }
            vit.num_classes = classes.len();
        }
        vit.validate()?;
        Ok(vit)
    }

    /// Pipeline for a model of geometry `vit`, encrypting with `key` if given.
    pub fn preprocess_spec(&self, vit: &ViTConfig, key: Option<u64>) -> Result<PreprocessSpec> {
        let target_size = self.preprocess.target_size.unwrap_or(vit.image_size);
        if target_size != vit.image_size {
            return Err(Error::Config(format!(
                "preprocess.target_size {target_size} differs from vit.image_size {}",
                vit.image_size
            )));
        }
        let spec = PreprocessSpec {
            target_size,
            interpolation: self.preprocess.interpolation,
            mean: self.preprocess.mean,
            std: self.preprocess.std,
            encryption: key.map(|key| EncryptionSpec {
                key,
                patch_size: vit.patch_size,
            }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_subset(&self) -> Subset {
        Subset {
            classes: self.data.classes.clone(),
            limit: self.data.limit,
        }
    }

    pub fn test_subset(&self) -> Subset {
        Subset {
            classes: self.data.classes.clone(),
            limit: self.data.test_limit,
        }
    }
}
