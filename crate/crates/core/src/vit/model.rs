use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::config::ViTConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::lora::{self, LoraConfig, LoraTarget};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Normalized float image, channel-major like [`crate::image::ImageTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FloatImage<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::dim(
                "float image",
                &[CHANNELS, height, width],
                &[data.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// `pixel / 255` with no per-channel statistics.
    pub fn from_u8(img: &crate::image::ImageTensor) -> Self {
        Self {
            height: img.height(),
            width: img.width(),
            data: img
                .pixels()
                .iter()
                .map(|&p| T::of(p as f64 / 255.0))
                .collect(),
        }
    }
}

/// Flattens an image into an `l × 3P²` matrix: one row per block in
/// row-major block order, each row in `(c, y, x)` order.
pub fn patchify<T: Scalar>(img: &FloatImage<T>, patch: usize) -> Result<(usize, usize, Vec<T>)> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(Error::Geometry {
            height: img.height,
            width: img.width,
            patch,
        });
    }
    let (h, w) = (img.height, img.width);
    let cols = CHANNELS * patch * patch;
    let rows = (h / patch) * (w / patch);
    let mut out = Vec::with_capacity(rows * cols);
    for by in (0..h).step_by(patch) {
        for bx in (0..w).step_by(patch) {
            for c in 0..CHANNELS {
                for y in 0..patch {
                    let start = (c * h + by + y) * w + bx;
                    out.extend_from_slice(&img.data[start..start + patch]);
                }
            }
        }
    }
    Ok((rows, cols, out))
}

/// Vision transformer backed by a flat, ordered parameter registry.
#[derive(Debug, Clone)]
pub struct ViTModel<T> {
    config: ViTConfig,
    registry: IndexMap<String, Tensor<T>>,
    lora: Option<LoraConfig>,
}

/// Registry entries in construction order.
pub fn parameter_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let m = cfg.mlp_dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![d, cfg.patch_dim()]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![cfg.num_patches() + 1, d]),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            (p("norm1.weight"), vec![d]),
            (p("norm1.bias"), vec![d]),
            (p("attn.w_q"), vec![d, d]),
            (p("attn.b_q"), vec![d]),
            (p("attn.w_k"), vec![d, d]),
            (p("attn.b_k"), vec![d]),
            (p("attn.w_v"), vec![d, d]),
            (p("attn.b_v"), vec![d]),
            (p("attn.w_o"), vec![d, d]),
            (p("attn.b_o"), vec![d]),
            (p("norm2.weight"), vec![d]),
            (p("norm2.bias"), vec![d]),
            (p("mlp.fc1.weight"), vec![m, d]),
            (p("mlp.fc1.bias"), vec![m]),
            (p("mlp.fc2.weight"), vec![d, m]),
            (p("mlp.fc2.bias"), vec![d]),
        ]);
    }
    out.extend([
        ("norm.weight".to_string(), vec![d]),
        ("norm.bias".to_string(), vec![d]),
        ("head.weight".to_string(), vec![cfg.num_classes, d]),
        ("head.bias".to_string(), vec![cfg.num_classes]),
    ]);
    out
}

fn truncated_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::of(v);
            }
        })
        .collect()
}

fn xavier_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..fan_in * fan_out)
        .map(|_| T::of(dist.sample(rng)))
        .collect()
}

fn is_projection(name: &str) -> bool {
    name.ends_with(".w_q")
        || name.ends_with(".w_k")
        || name.ends_with(".w_v")
        || name.ends_with(".w_o")
        || name.ends_with("fc1.weight")
        || name.ends_with("fc2.weight")
}

impl<T: Scalar> ViTModel<T> {
    /// All-zero weights. Cheap even at ViT-B scale; used for counting.
    pub fn zeros(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let registry = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self {
            config,
            registry,
            lora: None,
        })
    }

    /// Truncated-normal (std 0.02) embeddings and head, Xavier-uniform
    /// projections, zero biases, unit LayerNorm scales.
    pub fn init<R: Rng>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        for (name, t) in model.registry.iter_mut() {
            let n = t.numel();
            let data: Vec<T> = if is_projection(name) {
                let (rows, cols) = t.dims2()?;
                xavier_uniform(rng, rows, cols)
            } else if name.starts_with("patch_embed.weight")
                || name == "cls_token"
                || name == "pos_embed"
                || name == "head.weight"
            {
                truncated_normal(rng, n, INIT_STD)
            } else if name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight"
            {
                vec![T::one(); n]
            } else {
                continue;
            };
            t.data_mut().copy_from_slice(&data);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub(crate) fn set_lora(&mut self, cfg: Option<LoraConfig>) {
        self.lora = cfg;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.registry.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.registry.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.registry.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.registry
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.registry
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.registry.contains_key(name)
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.registry.contains_key(&name) {
            return Err(Error::State(format!("parameter {name} already registered")));
        }
        self.registry.insert(name, t);
        Ok(())
    }

    pub(crate) fn remove_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let before = self.registry.len();
        self.registry.retain(|k, _| !pred(k));
        before - self.registry.len()
    }

    /// Replaces the data of `name`, keeping its trainable flag.
    pub fn set_data(&mut self, name: &str, data: &[T]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.numel() != data.len() {
            return Err(Error::dim("set_data", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Exact element count over the registry, optionally trainable only.
    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.registry
            .values()
            .filter(|t| !trainable_only || t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.registry
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// SHA-256 of a tensor's little-endian bytes.
    pub fn digest(&self, name: &str) -> Result<[u8; 32]> {
        let t = self.get(name)?;
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Ok(Sha256::digest(&bytes).into())
    }

    pub fn zero_grads(&mut self) {
        self.registry.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .registry
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Builds the logits node for one image on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        params: &BoundParams,
        img: &FloatImage<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if img.height != cfg.image_size || img.width != cfg.image_size {
            return Err(Error::dim(
                "forward",
                &[cfg.image_size, cfg.image_size],
                &[img.height, img.width],
            ));
        }
        let patches = patch_embed(
            tape,
            img,
            cfg.patch_size,
            params.get("patch_embed.weight")?,
            params.get("patch_embed.bias")?,
        )?;
        let tokens = tape.concat_rows(&[params.get("cls_token")?, patches])?;
        let mut x = tape.add(tokens, params.get("pos_embed")?)?;

        let adapters = self.lora.as_ref().map(|l| (l.alpha, l.rank));
        for i in 0..cfg.depth {
            let w = BlockVars::from_params(params, i, adapters)?;
            x = attention_block(tape, x, &w, cfg.num_heads)?;
        }
        let eps = T::of(LAYER_NORM_EPS);
        let x = tape.layer_norm(x, params.get("norm.weight")?, params.get("norm.bias")?, eps)?;
        let cls = tape.row(x, 0)?;
        let logits = tape.matmul_t(cls, params.get("head.weight")?)?;
        tape.add_row(logits, params.get("head.bias")?)
    }

    /// Inference-only logits.
    pub fn logits(&self, img: &FloatImage<T>) -> Result<Vec<T>> {
        let mut tape = Tape::no_grad();
        let params = self.bind(&mut tape);
        let out = self.forward_on(&mut tape, &params, img)?;
        Ok(tape.value(out).to_vec())
    }
}

/// Parameter name → tape leaf, for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Patch embedding: `patchify(img) · W_Eᵀ + b_E`, one token per block.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    img: &FloatImage<T>,
    patch: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let (rows, cols, data) = patchify(img, patch)?;
    let x = tape.constant(vec![rows, cols], data)?;
    let proj = tape.matmul_t(x, weight)?;
    tape.add_row(proj, bias)
}

/// Tape-free convenience around [`patch_embed`].
pub fn patch_embed_tensor<T: Scalar>(
    img: &FloatImage<T>,
    patch: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let (w, b) = (tape.leaf(weight), tape.leaf(bias));
    let out = patch_embed(&mut tape, img, patch, w, b)?;
    Ok(tape.to_tensor(out))
}

/// Low-rank factors `(W_A, W_B)` plus `α` and `r` for one projection.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub alpha: f64,
    pub rank: usize,
}

/// Tape handles for one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub lora_q: Option<AdapterVars>,
    pub lora_v: Option<AdapterVars>,
}

impl BlockVars {
    pub fn from_params(
        params: &BoundParams,
        block: usize,
        adapters: Option<(f64, usize)>,
    ) -> Result<Self> {
        let g = |s: &str| params.get(&format!("blocks.{block}.{s}"));
        let adapter = |target: LoraTarget| -> Result<Option<AdapterVars>> {
            let Some((alpha, rank)) = adapters else {
                return Ok(None);
            };
            let (a_name, b_name) = lora::adapter_names(&lora::owner_name(block, target));
            match (params.try_get(&a_name), params.try_get(&b_name)) {
                (Some(a), Some(b)) => Ok(Some(AdapterVars { a, b, alpha, rank })),
                (None, None) => Ok(None),
                _ => Err(Error::State(format!("half-registered adapter {a_name}"))),
            }
        };
        Ok(Self {
            norm1: (g("norm1.weight")?, g("norm1.bias")?),
            q: (g("attn.w_q")?, g("attn.b_q")?),
            k: (g("attn.w_k")?, g("attn.b_k")?),
            v: (g("attn.w_v")?, g("attn.b_v")?),
            o: (g("attn.w_o")?, g("attn.b_o")?),
            norm2: (g("norm2.weight")?, g("norm2.bias")?),
            fc1: (g("mlp.fc1.weight")?, g("mlp.fc1.bias")?),
            fc2: (g("mlp.fc2.weight")?, g("mlp.fc2.bias")?),
            lora_q: adapter(LoraTarget::Q)?,
            lora_v: adapter(LoraTarget::V)?,
        })
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul_t(x, w)?;
    tape.add_row(y, b)
}

fn projection<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    (w, b): (Var, Var),
    adapter: Option<AdapterVars>,
) -> Result<Var> {
    match adapter {
        Some(ad) => lora::lora_forward(tape, x, w, Some(b), ad.a, ad.b, ad.alpha, ad.rank),
        None => linear(tape, x, (w, b)),
    }
}

/// Pre-norm encoder block over an `(l+1) × d` token matrix.
pub fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &BlockVars,
    num_heads: usize,
) -> Result<Var> {
    let (_, d) = match tape.shape(x) {
        [r, c] => (*r, *c),
        s => return Err(Error::dim("attention_block", s, &[])),
    };
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::dim("attention_block heads", &[d], &[num_heads]));
    }
    let dh = d / num_heads;
    let eps = T::of(LAYER_NORM_EPS);

    let h = tape.layer_norm(x, w.norm1.0, w.norm1.1, eps)?;
    let q = projection(tape, h, w.q, w.lora_q)?;
    let k = linear(tape, h, w.k)?;
    let v = projection(tape, h, w.v, w.lora_v)?;

    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let (s, e) = (i * dh, (i + 1) * dh);
        let qh = tape.slice_cols(q, s, e)?;
        let kh = tape.slice_cols(k, s, e)?;
        let vh = tape.slice_cols(v, s, e)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn_out = linear(tape, merged, w.o)?;
    let x = tape.add(x, attn_out)?;

    let h = tape.layer_norm(x, w.norm2.0, w.norm2.1, eps)?;
    let h = linear(tape, h, w.fc1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, w.fc2)?;
    tape.add(x, h)
}
