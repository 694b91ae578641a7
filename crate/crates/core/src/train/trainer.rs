use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::TuningPolicy;
use super::report::RunReport;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::ViTModel;

/// Element type used for a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            precision: Precision::F32,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Aborts when the loss stays above this multiple of the first loss ...
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// ... for this many consecutive steps.
pub const DIVERGENCE_PATIENCE: usize = 50;

const SHUFFLE_STREAM: u64 = 0x5348_5546_464C_4531;

pub fn shuffle_seed(seed: u64) -> u64 {
    seed ^ SHUFFLE_STREAM
}

/// Mean cross-entropy of a batch, recorded on `tape`.
fn batch_loss<T: Scalar>(
    model: &ViTModel<T>,
    tape: &mut Tape<T>,
    params: &crate::vit::BoundParams,
    batch: &[&Sample<T>],
) -> Result<crate::autodiff::Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let logits = model.forward_on(tape, params, &s.image)?;
        terms.push(tape.cross_entropy(logits, s.label)?);
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, T::of(1.0 / batch.len() as f64)))
}

/// Fine-tunes the tensors `policy` marked trainable with Adam on
/// cross-entropy. Batch order is reshuffled each epoch from `cfg.seed`;
/// the last partial batch is kept. Accuracy is measured on `eval`, or on
/// `data` when `eval` is empty.
pub fn train<T: Scalar>(
    model: &mut ViTModel<T>,
    policy: &TuningPolicy,
    data: &[Sample<T>],
    eval: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut states: IndexMap<String, AdamState<T>> = IndexMap::new();
    for name in &policy.trainable {
        let t = model.get(name)?;
        if !t.requires_grad() {
            return Err(Error::State(format!("{name} is in the policy but frozen")));
        }
        states.insert(name.clone(), AdamState::zeros(t.numel()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut initial_loss = None;
    let mut above = 0usize;
    let mut step = 0usize;

    'epochs: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                if count > 0 {
                    epoch_losses.push(sum / count as f64);
                }
                break 'epochs;
            }
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let loss_var = batch_loss(model, &mut tape, &params, &batch)?;
            let loss = tape.value(loss_var)[0].to_f64_lossy();

            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            let first = *initial_loss.get_or_insert(loss);
            above = if loss > DIVERGENCE_FACTOR * first {
                above + 1
            } else {
                0
            };
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    step,
                    reason: format!(
                        "loss {loss} above {DIVERGENCE_FACTOR}x initial {first} for {DIVERGENCE_PATIENCE} steps"
                    ),
                });
            }

            let grads = tape.backward(loss_var)?;
            for (name, state) in states.iter_mut() {
                let tensor = model.get_mut(name)?;
                if let Some(g) = grads.get(params.get(name)?) {
                    tensor.accumulate_grad(g)?;
                }
                let Some(g) = tensor.take_grad() else {
                    continue;
                };
                adam_step(tensor.data_mut(), &g, state, &adam)?;
            }
            sum += loss;
            count += 1;
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
    }

    let accuracy = evaluate(model, if eval.is_empty() { data } else { eval })?;
    let trainable_params = model.count_params(true);
    Ok(RunReport {
        mode: policy.mode,
        epochs: epoch_losses.len(),
        steps: step,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        final_loss: *epoch_losses.last().unwrap_or(&f64::NAN),
        epoch_losses,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        accuracy,
        trainable_params,
        total_params: model.count_params(false),
        optimizer_state_floats: states.values().map(|s| 2 * s.first_moment.len()).sum(),
        encrypted: false,
        key_fingerprint: None,
        seed: cfg.seed,
        started_unix: None,
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate<T: Scalar>(model: &ViTModel<T>, data: &[Sample<T>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    for s in data {
        if argmax(&model.logits(&s.image)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
