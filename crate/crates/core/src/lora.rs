//! Low-rank adapters on the query and value projections.
//!
//! An adapted projection computes `W x + b + (α/r)·W_B W_A x` with
//! `W_A: r × d` and `W_B: d × r`. `W_B` starts at zero so an adapted model
//! is functionally identical to its base until the first update. Adapters
//! are side branches: the base weight is never touched until [`merge`].
//!
//! Adapter tensors live in the model registry as
//! `lora.<owner>.a` / `lora.<owner>.b`, where `<owner>` is the wrapped
//! projection, e.g. `lora.blocks.3.attn.w_q.a`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm_nn, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::{ViTConfig, ViTModel};

pub const LORA_PREFIX: &str = "lora.";
const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    V,
}

impl LoraTarget {
    fn weight_suffix(self) -> &'static str {
        match self {
            LoraTarget::Q => "w_q",
            LoraTarget::V => "w_v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 4.0,
            targets: vec![LoraTarget::Q, LoraTarget::V],
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= embed_dim {
            return Err(Error::Config(format!(
                "lora rank must satisfy 0 < r < d, got r={} d={embed_dim}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "lora alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora targets must not be empty".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort_by_key(|t| *t as u8);
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::Config("duplicate lora target".into()));
        }
        Ok(())
    }

    /// `L · |targets| · 2·d·r`.
    pub fn param_count(&self, vit: &ViTConfig) -> usize {
        vit.depth * self.targets.len() * 2 * vit.embed_dim * self.rank
    }
}

/// Names one adapter pair and the projection it wraps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraAdapter {
    pub owner: String,
    pub a_name: String,
    pub b_name: String,
}

pub fn owner_name(block: usize, target: LoraTarget) -> String {
    format!("blocks.{block}.attn.{}", target.weight_suffix())
}

pub fn adapter_names(owner: &str) -> (String, String) {
    (
        format!("{LORA_PREFIX}{owner}.a"),
        format!("{LORA_PREFIX}{owner}.b"),
    )
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(LORA_PREFIX)
}

/// Adds one `(W_A, W_B)` pair per target projection per block.
/// `W_A ~ N(0, 0.02²)`, `W_B = 0`.
pub fn inject<T: Scalar, R: Rng>(
    model: &mut ViTModel<T>,
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<Vec<LoraAdapter>> {
    if model.lora().is_some() || model.names().any(is_adapter_param) {
        return Err(Error::State("model already has adapters".into()));
    }
    let vit = *model.config();
    cfg.validate(vit.embed_dim)?;
    let (d, r) = (vit.embed_dim, cfg.rank);
    let normal = Normal::new(0.0, A_INIT_STD).expect("positive std");

    let mut adapters = Vec::with_capacity(vit.depth * cfg.targets.len());
    for block in 0..vit.depth {
        for &target in &cfg.targets {
            let owner = owner_name(block, target);
            let (a_name, b_name) = adapter_names(&owner);
            let a_data = (0..r * d).map(|_| T::of(normal.sample(rng))).collect();
            model.insert(a_name.clone(), Tensor::new(vec![r, d], a_data)?)?;
            model.insert(b_name.clone(), Tensor::zeros(&[d, r]))?;
            adapters.push(LoraAdapter {
                owner,
                a_name,
                b_name,
            });
        }
    }
    model.set_lora(Some(cfg.clone()));
    Ok(adapters)
}

/// Adapters currently registered on `model`, in registry order.
pub fn adapters<T: Scalar>(model: &ViTModel<T>) -> Vec<LoraAdapter> {
    model
        .names()
        .filter_map(|n| n.strip_prefix(LORA_PREFIX)?.strip_suffix(".a"))
        .map(|owner| {
            let (a_name, b_name) = adapter_names(owner);
            LoraAdapter {
                owner: owner.to_string(),
                a_name,
                b_name,
            }
        })
        .collect()
}

/// Removes every adapter tensor; returns how many were dropped.
pub fn eject<T: Scalar>(model: &mut ViTModel<T>) -> usize {
    model.set_lora(None);
    model.remove_where(is_adapter_param)
}

/// `x Wᵀ + b + (α/r)·(x W_Aᵀ) W_Bᵀ` over a token-per-row matrix `x`.
#[allow(clippy::too_many_arguments)]
pub fn lora_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    alpha: f64,
    rank: usize,
) -> Result<Var> {
    let (a_shape, b_shape) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if a_shape.first() != Some(&rank) || b_shape.get(1) != Some(&rank) {
        return Err(Error::dim("lora rank", &a_shape, &b_shape));
    }
    let base = tape.matmul_t(x, w)?;
    let base = match bias {
        Some(bias) => tape.add_row(base, bias)?,
        None => base,
    };
    let down = tape.matmul_t(x, a)?;
    let up = tape.matmul_t(down, b)?;
    let update = tape.scale(up, T::of(alpha / rank as f64));
    tape.add(base, update)
}

/// `W + (α/r)·W_B W_A`.
pub fn merge<T: Scalar>(
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
    rank: usize,
) -> Result<Tensor<T>> {
    let (d_out, d_in) = w.dims2()?;
    let (ra, a_in) = a.dims2()?;
    let (b_out, rb) = b.dims2()?;
    if ra != rank || rb != rank || a_in != d_in || b_out != d_out {
        return Err(Error::dim("merge", w.shape(), &[ra, a_in, b_out, rb]));
    }
    let mut delta = vec![T::zero(); d_out * d_in];
    gemm_nn(b.data(), a.data(), &mut delta, d_out, rank, d_in);
    let s = T::of(alpha / rank as f64);
    let data = w
        .data()
        .iter()
        .zip(&delta)
        .map(|(&wv, &dv)| wv + s * dv)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Folds every adapter into its base projection and drops the adapter
/// tensors, giving a plain model for adapter-free inference.
pub fn merged_model<T: Scalar>(model: &ViTModel<T>) -> Result<ViTModel<T>> {
    let cfg = model
        .lora()
        .cloned()
        .ok_or_else(|| Error::State("model has no adapters to merge".into()))?;
    let mut out = model.clone();
    for ad in adapters(model) {
        let merged = merge(
            model.get(&ad.owner)?,
            model.get(&ad.a_name)?,
            model.get(&ad.b_name)?,
            cfg.alpha,
            cfg.rank,
        )?;
        out.set_data(&ad.owner, merged.data())?;
    }
    eject(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn vit_b16_adapter_counts() {
        let vit = ViTConfig::vit_b16(10);
        assert_eq!(LoraConfig::with_rank(8).param_count(&vit), 294_912);
        assert_eq!(LoraConfig::with_rank(4).param_count(&vit), 147_456);
    }

    #[test]
    fn single_target_small_count() {
        let vit = ViTConfig {
            image_size: 4,
            patch_size: 2,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_dim: 8,
            num_classes: 2,
        };
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: vec![LoraTarget::Q],
        };
        let mut model = ViTModel::<f32>::zeros(vit).unwrap();
        let ads = inject(&mut model, &cfg, &mut rng()).unwrap();
        assert_eq!(ads.len(), 1);
        assert_eq!(model.count_matching(is_adapter_param), 32);
        assert_eq!(cfg.param_count(&vit), 32);
    }

    #[test]
    fn inject_registers_zero_b_and_rejects_double_injection() {
        let mut model = ViTModel::<f32>::zeros(ViTConfig::toy(2)).unwrap();
        let base_total = model.count_params(false);
        let ads = inject(&mut model, &LoraConfig::with_rank(4), &mut rng()).unwrap();
        assert_eq!(ads.len(), 4);
        assert_eq!(ads, adapters(&model));
        for ad in &ads {
            assert!(model
                .get(&ad.b_name)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0));
            assert!(model
                .get(&ad.a_name)
                .unwrap()
                .data()
                .iter()
                .any(|&v| v != 0.0));
        }
        assert_eq!(
            model.count_params(false),
            base_total + LoraConfig::with_rank(4).param_count(model.config())
        );
        assert!(matches!(
            inject(&mut model, &LoraConfig::with_rank(4), &mut rng()),
            Err(Error::State(_))
        ));
        assert_eq!(eject(&mut model), 8);
        assert_eq!(model.count_params(false), base_total);
    }

    #[test]
    fn rank_must_be_below_dim() {
        let mut model = ViTModel::<f32>::zeros(ViTConfig::toy(2)).unwrap();
        assert!(inject(&mut model, &LoraConfig::with_rank(16), &mut rng()).is_err());
        assert!(inject(&mut model, &LoraConfig::with_rank(0), &mut rng()).is_err());
    }

    #[test]
    fn scaling_equivalence() {
        let a = LoraConfig {
            rank: 8,
            alpha: 4.0,
            ..LoraConfig::default()
        };
        let b = LoraConfig {
            rank: 2,
            alpha: 1.0,
            ..LoraConfig::default()
        };
        assert_eq!(a.scaling(), 0.5);
        assert_eq!(a.scaling(), b.scaling());
    }

    #[test]
    fn zero_b_gives_base_projection_exactly() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(vec![3, 6], (0..18).map(|v| (v as f64).cos()).collect())
            .unwrap();
        let w = tape
            .constant(
                vec![6, 6],
                (0..36).map(|v| (v as f64 * 0.3).sin()).collect(),
            )
            .unwrap();
        let a = tape
            .constant(vec![2, 6], (0..12).map(|v| v as f64 * 0.1).collect())
            .unwrap();
        let b = tape.constant(vec![6, 2], vec![0.0; 12]).unwrap();
        let y = lora_forward(&mut tape, x, w, None, a, b, 4.0, 2).unwrap();
        let base = tape.matmul_t(x, w).unwrap();
        assert_eq!(tape.value(y), tape.value(base));
        assert!(matches!(
            lora_forward(&mut tape, x, w, None, a, b, 4.0, 3),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn doubling_alpha_doubles_update() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(vec![3, 6], (0..18).map(|v| (v as f64).cos()).collect())
            .unwrap();
        let w = tape
            .constant(
                vec![6, 6],
                (0..36).map(|v| (v as f64 * 0.3).sin()).collect(),
            )
            .unwrap();
        let a = tape
            .constant(vec![2, 6], (0..12).map(|v| v as f64 * 0.1 - 0.5).collect())
            .unwrap();
        let b = tape
            .constant(vec![6, 2], (0..12).map(|v| v as f64 * 0.07).collect())
            .unwrap();
        let base = tape.matmul_t(x, w).unwrap();
        let y1 = lora_forward(&mut tape, x, w, None, a, b, 4.0, 2).unwrap();
        let y2 = lora_forward(&mut tape, x, w, None, a, b, 8.0, 2).unwrap();
        for ((&b0, &v1), &v2) in tape
            .value(base)
            .iter()
            .zip(tape.value(y1))
            .zip(tape.value(y2))
        {
            // Exact in the scaled branch; the subtraction from the sum rounds.
            assert!((2.0 * (v1 - b0) - (v2 - b0)).abs() <= 1e-12 * (1.0 + b0.abs()));
        }
    }

    #[test]
    fn merge_with_zero_adapter_is_bitwise_identity() {
        let w = Tensor::new(vec![4, 4], (0..16).map(|v| v as f32 * 0.37).collect()).unwrap();
        let a = Tensor::new(vec![2, 4], (0..8).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::zeros(&[4, 2]);
        assert_eq!(merge(&w, &a, &b, 4.0, 2).unwrap().data(), w.data());
    }

    #[test]
    fn merge_then_subtract_recovers_base() {
        let w = Tensor::new(vec![4, 4], (0..16).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = Tensor::new(vec![2, 4], (0..8).map(|v| (v as f64).cos()).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.25).collect()).unwrap();
        let merged = merge(&w, &a, &b, 4.0, 2).unwrap();
        let mut delta = vec![0.0; 16];
        gemm_nn(b.data(), a.data(), &mut delta, 4, 2, 4);
        for ((&m, &dv), &wv) in merged.data().iter().zip(&delta).zip(w.data()) {
            assert!((m - 2.0 * dv - wv).abs() < 1e-6);
        }
    }
}
