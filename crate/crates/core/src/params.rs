//! Parameter-count report for the three tuning modes.
//!
//! Every figure is taken from a live registry and cross-checked against
//! its closed form; a disagreement is an error rather than a warning.

use std::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::{eject, inject, is_adapter_param, LoraConfig};
use crate::train::{apply_policy, TuningMode};
use crate::vit::{ViTConfig, ViTModel};

/// Published trainable-parameter figures, in millions.
pub const PUBLISHED_FULL_M: f64 = 82.56;
pub const PUBLISHED_MELO_M: f64 = 0.15;
pub const PUBLISHED_OURS_M: f64 = 0.71;

/// Ranks always reported next to the requested one.
pub const REPORTED_RANKS: [usize; 2] = [4, 8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankCounts {
    pub rank: usize,
    pub adapters: usize,
    pub melo: usize,
    pub ours: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub vit: ViTConfig,
    pub mode: TuningMode,
    pub rank: usize,
    pub total: usize,
    pub patch_embed: usize,
    pub head: usize,
    /// Trainable count of `mode` at `rank`.
    pub trainable: usize,
    pub per_rank: Vec<RankCounts>,
}

/// Millions, truncated to two decimals.
pub fn millions_truncated(n: usize) -> f64 {
    (n / 10_000) as f64 / 100.0
}

/// Millions, rounded half-up to two decimals.
pub fn millions_nearest(n: usize) -> f64 {
    ((n + 5_000) / 10_000) as f64 / 100.0
}

fn check(what: &str, live: usize, closed: usize) -> Result<usize> {
    if live != closed {
        return Err(Error::State(format!(
            "{what}: registry has {live}, closed form gives {closed}"
        )));
    }
    Ok(live)
}

fn counts_at(model: &mut ViTModel<f32>, lora: &LoraConfig) -> Result<RankCounts> {
    let vit = *model.config();
    lora.validate(vit.embed_dim)?;
    eject(model);
    inject(model, lora, &mut ChaCha8Rng::seed_from_u64(0))?;
    let breakdown = vit.param_breakdown();
    let adapters = check(
        &format!("adapters r={}", lora.rank),
        model.count_matching(is_adapter_param),
        lora.param_count(&vit),
    )?;
    apply_policy(model, TuningMode::MeLo)?;
    let melo = check("melo", model.count_params(true), adapters + breakdown.head)?;
    apply_policy(model, TuningMode::Ours)?;
    let ours = check(
        "ours",
        model.count_params(true),
        adapters + breakdown.head + breakdown.patch_embed,
    )?;
    Ok(RankCounts {
        rank: lora.rank,
        adapters,
        melo,
        ours,
    })
}

/// Counts for `vit` under `mode` at `lora.rank`, plus the ranks in
/// [`REPORTED_RANKS`].
pub fn param_report(vit: &ViTConfig, lora: &LoraConfig, mode: TuningMode) -> Result<ParamReport> {
    let mut model = ViTModel::<f32>::zeros(*vit)?;
    let breakdown = vit.param_breakdown();
    let total = check("total", model.count_params(false), breakdown.total())?;
    let patch_embed = check(
        "patch_embed",
        model.count_matching(|n| n.starts_with("patch_embed.")),
        breakdown.patch_embed,
    )?;
    let head = check(
        "head",
        model.count_matching(|n| n.starts_with("head.")),
        breakdown.head,
    )?;

    let mut ranks: Vec<usize> = REPORTED_RANKS.to_vec();
    if !ranks.contains(&lora.rank) {
        ranks.push(lora.rank);
    }
    let mut per_rank = Vec::new();
    for r in ranks {
        let cfg = LoraConfig {
            rank: r,
            ..lora.clone()
        };
        if r < vit.embed_dim {
            per_rank.push(counts_at(&mut model, &cfg)?);
        }
    }
    let trainable = match mode {
        TuningMode::Full => total,
        TuningMode::MeLo | TuningMode::Ours => {
            let c = per_rank
                .iter()
                .find(|c| c.rank == lora.rank)
                .ok_or_else(|| {
                    Error::Parameter(format!("rank {} not below embed_dim", lora.rank))
                })?;
            if mode == TuningMode::MeLo {
                c.melo
            } else {
                c.ours
            }
        }
    };
    Ok(ParamReport {
        vit: *vit,
        mode,
        rank: lora.rank,
        total,
        patch_embed,
        head,
        trainable,
        per_rank,
    })
}

/// `key: value` lines. With `published_delta`, adds differences from the
/// published figures.
pub fn format_report(r: &ParamReport, published_delta: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", r.mode);
    let _ = writeln!(s, "rank: {}", r.rank);
    let _ = writeln!(s, "total_params: {}", r.total);
    let _ = writeln!(s, "patch_embed_params: {}", r.patch_embed);
    let _ = writeln!(s, "head_params: {}", r.head);
    for c in &r.per_rank {
        let _ = writeln!(s, "adapter_params_r{}: {}", c.rank, c.adapters);
        let _ = writeln!(s, "melo_trainable_r{}: {}", c.rank, c.melo);
        let _ = writeln!(s, "ours_trainable_r{}: {}", c.rank, c.ours);
    }
    let _ = writeln!(s, "trainable_params: {}", r.trainable);
    let _ = writeln!(
        s,
        "trainable_millions: {:.2} (nearest {:.2})",
        millions_truncated(r.trainable),
        millions_nearest(r.trainable)
    );
    if published_delta {
        let full = r.total;
        let _ = writeln!(
            s,
            "delta_full_vs_{PUBLISHED_FULL_M}M: {}",
            full as i64 - (PUBLISHED_FULL_M * 1e6).round() as i64
        );
        for c in &r.per_rank {
            let _ = writeln!(
                s,
                "melo_r{}_millions: {:.2} (nearest {:.2}; published {PUBLISHED_MELO_M})",
                c.rank,
                millions_truncated(c.melo),
                millions_nearest(c.melo)
            );
            let _ = writeln!(
                s,
                "delta_ours_r{}_vs_{PUBLISHED_OURS_M}M: {}",
                c.rank,
                c.ours as i64 - (PUBLISHED_OURS_M * 1e6).round() as i64
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn millions() {
        assert_eq!(millions_truncated(155_146), 0.15);
        assert_eq!(millions_nearest(155_146), 0.16);
        assert_eq!(millions_truncated(893_194), 0.89);
        assert_eq!(millions_nearest(85_806_346), 85.81);
    }

    #[test]
    fn toy_report_is_consistent() {
        let r = param_report(
            &ViTConfig::toy(2),
            &LoraConfig::with_rank(2),
            TuningMode::Ours,
        )
        .unwrap();
        assert_eq!(r.per_rank.len(), 3);
        let c = r.per_rank.iter().find(|c| c.rank == 2).unwrap();
        assert_eq!(r.trainable, c.ours);
        assert!(c.melo < c.ours && c.ours < r.total);
        let text = format_report(&r, true);
        assert!(text.contains("adapter_params_r4:"));
        assert!(text.contains("delta_full_vs_82.56M:"));
    }
}
