//! Named-tensor checkpoints.
//!
//! A checkpoint directory holds `manifest.json`, a JSON array of
//! `{name, dtype, shape, offset, length}` entries, and `weights.bin`, the
//! little-endian tensor bytes concatenated in manifest order. `offset` and
//! `length` are byte positions within `weights.bin`.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lora::is_adapter_param;
use crate::scalar::{DType, Scalar};
use crate::vit::ViTModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Which registry entries a checkpoint carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    All,
    /// Only `lora.*` tensors, for small adapter artifacts.
    AdaptersOnly,
}

pub fn save<'a, T: Scalar>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut manifest = Vec::new();
    for (name, t) in tensors {
        let offset = bytes.len() as u64;
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        manifest.push(ManifestEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    let weights = dir.join(WEIGHTS_FILE);
    std::fs::write(&weights, &bytes).map_err(|e| Error::io(&weights, e))?;
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn save_model<T: Scalar>(
    dir: &Path,
    model: &ViTModel<T>,
    selection: Selection,
) -> Result<Vec<ManifestEntry>> {
    save(
        dir,
        model
            .iter()
            .filter(|(name, _)| selection == Selection::All || is_adapter_param(name)),
    )
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every tensor, converting to `T` when the stored dtype differs.
pub fn load<T: Scalar>(dir: &Path) -> Result<IndexMap<String, Tensor<T>>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = IndexMap::with_capacity(manifest.len());
    for entry in manifest {
        let bad = |reason: String| Error::Format {
            path: path.clone(),
            offset: entry.offset,
            reason,
        };
        let size = entry.dtype.size_of();
        let count: usize = entry.shape.iter().product();
        if entry.length != (count * size) as u64 {
            return Err(bad(format!(
                "{}: length {} does not match shape {:?}",
                entry.name, entry.length, entry.shape
            )));
        }
        let end = entry.offset + entry.length;
        if end > bytes.len() as u64 {
            return Err(bad(format!("{}: extends past end of weights", entry.name)));
        }
        let raw = &bytes[entry.offset as usize..end as usize];
        let data: Vec<T> = match entry.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::read_le(c)))
                .collect(),
        };
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        if out.insert(entry.name.clone(), tensor).is_some() {
            return Err(bad(format!("duplicate tensor {}", entry.name)));
        }
    }
    Ok(out)
}

/// Copies stored tensors into `model`. Every stored name must exist with
/// the same shape; trainable flags are left untouched.
pub fn load_into<T: Scalar>(
    model: &mut ViTModel<T>,
    tensors: &IndexMap<String, Tensor<T>>,
) -> Result<()> {
    for (name, t) in tensors {
        let target = model.get(name)?;
        if target.shape() != t.shape() {
            return Err(Error::dim("checkpoint", target.shape(), t.shape()));
        }
        model.set_data(name, t.data())?;
    }
    Ok(())
}
