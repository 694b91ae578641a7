//! Central-difference check of the tape gradients on a small adapted ViT.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{inject, LoraConfig};
use crate::train::{apply_policy, TuningMode};
use crate::vit::{BoundParams, FloatImage, ViTConfig, ViTModel};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor, so that gradients near zero are judged on an
/// absolute scale instead of amplifying cancellation noise.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradcheckSpec {
    pub vit: ViTConfig,
    pub lora: LoraConfig,
    pub seed: u64,
    pub batch: usize,
    /// Coordinates probed in each tensor group.
    pub probes_per_group: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl GradcheckSpec {
    pub fn new(vit: ViTConfig, lora: LoraConfig) -> Self {
        Self {
            vit,
            lora,
            seed: 0,
            batch: 2,
            probes_per_group: 30,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

type Recorded = (Tape<f64>, BoundParams, Var);

fn loss(
    model: &ViTModel<f64>,
    data: &[(FloatImage<f64>, usize)],
    grad: bool,
) -> Result<(f64, Option<Recorded>)> {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let params = model.bind(&mut tape);
    let mut terms = Vec::with_capacity(data.len());
    for (img, label) in data {
        let logits = model.forward_on(&mut tape, &params, img)?;
        terms.push(tape.cross_entropy(logits, *label)?);
    }
    let sum = tape.add_n(&terms)?;
    let mean = tape.scale(sum, 1.0 / data.len() as f64);
    let value = tape.value(mean)[0];
    Ok((value, grad.then_some((tape, params, mean))))
}

/// Builds the adapted model (with `W_B` randomized so that `W_A` receives
/// gradient), then compares analytic and numeric gradients on
/// `probes_per_group` coordinates of `W_A`, `W_B`, the patch embedding,
/// the head and the transformer blocks.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    if spec.step.is_nan() || spec.step <= 0.0 || spec.probes_per_group == 0 || spec.batch == 0 {
        return Err(Error::Parameter(
            "gradcheck needs step > 0 and nonzero counts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut model = ViTModel::<f64>::init(spec.vit, &mut rng)?;
    inject(&mut model, &spec.lora, &mut rng)?;
    let normal = Normal::new(0.0, 0.1).map_err(|e| Error::Parameter(e.to_string()))?;
    for (name, t) in model.iter_mut() {
        if name.starts_with("lora.") && name.ends_with(".b") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    apply_policy(&mut model, TuningMode::Full)?;

    let side = spec.vit.image_size;
    let data: Vec<(FloatImage<f64>, usize)> = (0..spec.batch)
        .map(|_| {
            let px = (0..3 * side * side)
                .map(|_| normal.sample(&mut rng) * 10.0)
                .collect();
            FloatImage::new(side, side, px)
                .map(|img| (img, rng.random_range(0..spec.vit.num_classes)))
        })
        .collect::<Result<_>>()?;

    let Some((tape, params, out)) = loss(&model, &data, true)?.1 else {
        return Err(Error::State("gradient tape was not recorded".into()));
    };
    let grads = tape.backward(out)?;

    let selectors: [&dyn Fn(&str) -> bool; 5] = [
        &|n| n.starts_with("lora.") && n.ends_with(".a"),
        &|n| n.starts_with("lora.") && n.ends_with(".b"),
        &|n| n.starts_with("patch_embed."),
        &|n| n.starts_with("head."),
        &|n| {
            n.starts_with("blocks.")
                || n == "pos_embed"
                || n == "cls_token"
                || n.starts_with("norm.")
        },
    ];
    let mut targets: Vec<(String, usize)> = Vec::new();
    for select in selectors {
        let coords: Vec<(String, usize)> = model
            .iter()
            .filter(|(n, _)| select(n))
            .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
            .collect();
        let take = spec.probes_per_group.min(coords.len());
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), take).into_vec();
        picked.sort_unstable();
        targets.extend(picked.into_iter().map(|i| coords[i].clone()));
    }

    let mut probes = Vec::with_capacity(targets.len());
    for (name, index) in targets {
        let var = params.get(&name)?;
        let analytic = grads.get(var).map_or(0.0, |g| g[index]);
        let original = model.get(&name)?.data()[index];
        model.get_mut(&name)?.data_mut()[index] = original + spec.step;
        let (plus, _) = loss(&model, &data, false)?;
        model.get_mut(&name)?.data_mut()[index] = original - spec.step;
        let (minus, _) = loss(&model, &data, false)?;
        model.get_mut(&name)?.data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * spec.step);
        probes.push(Probe {
            name,
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        probes,
        max_rel_err,
        tolerance: spec.tolerance,
    })
}
