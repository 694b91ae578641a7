//! End-to-end train and eval commands.
//!
//! A training run writes, under its output directory:
//!
//! - `checkpoint/` holding `manifest.json`, `weights.bin` and `config.json`
//! - `report.json`
//! - `runs.csv` (appended)

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Selection};
use crate::config::ExperimentConfig;
use crate::crypto::EncryptionKey;
use crate::data::{load_split, Preprocessor, Split};
use crate::error::{Error, Result};
use crate::lora::{inject, is_adapter_param};
use crate::scalar::Scalar;
use crate::train::{apply_policy, evaluate, train, Precision, RunReport, TuningMode};
use crate::vit::ViTModel;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const RUNS_CSV: &str = "runs.csv";

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub config: ExperimentConfig,
    pub mode: TuningMode,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub toy: bool,
    pub encrypt_key: Option<u64>,
    /// Overrides `train.seed`.
    pub seed: Option<u64>,
    /// Overrides `data.limit`.
    pub limit: Option<usize>,
}

/// Loads data, builds and fine-tunes the model, and writes the run outputs.
pub fn run_train(req: &TrainRequest) -> Result<RunReport> {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .ok();
    let mut config = req.config.clone();
    if let Some(seed) = req.seed {
        config.train.seed = seed;
    }
    if let Some(limit) = req.limit {
        config.data.limit = Some(limit);
    }
    config.train.validate()?;
    let vit = config.resolve_vit(req.toy)?;
    config.vit = Some(vit);
    if req.mode.needs_adapters() {
        config.lora.validate(vit.embed_dim)?;
    }
    let spec = config.preprocess_spec(&vit, req.encrypt_key)?;
    config.preprocess.target_size = Some(spec.target_size);

    let train_records = load_split(&req.data_dir, Split::Train, &config.train_subset())?;
    let test_records = match load_split(&req.data_dir, Split::Test, &config.test_subset()) {
        Ok(r) => r,
        Err(Error::Io { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    let pre = Preprocessor::new(spec)?;

    let mut report = match config.train.precision {
        Precision::F32 => train_typed::<f32>(&config, req, &pre, &train_records, &test_records)?,
        Precision::F64 => train_typed::<f64>(&config, req, &pre, &train_records, &test_records)?,
    };
    report.encrypted = req.encrypt_key.is_some();
    report.key_fingerprint = req.encrypt_key.map(|k| EncryptionKey(k).fingerprint());
    report.started_unix = started;

    let ckpt = req.out_dir.join(CHECKPOINT_DIR);
    let config_path = ckpt.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_json()?).map_err(|e| Error::io(&config_path, e))?;
    report.write_json(&req.out_dir.join(REPORT_FILE))?;
    report.append_csv(&req.out_dir.join(RUNS_CSV))?;
    Ok(report)
}

fn train_typed<T: Scalar>(
    config: &ExperimentConfig,
    req: &TrainRequest,
    pre: &Preprocessor,
    train_records: &[crate::data::Cifar10Record],
    test_records: &[crate::data::Cifar10Record],
) -> Result<RunReport> {
    let vit = config
        .vit
        .ok_or_else(|| Error::Config("unresolved model".into()))?;
    let train_set = pre.prepare::<T>(train_records)?;
    let test_set = pre.prepare::<T>(test_records)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut model = ViTModel::<T>::init(vit, &mut rng)?;
    if let Some(dir) = &config.pretrained {
        let tensors = checkpoint::load::<T>(dir)?;
        let base: indexmap::IndexMap<_, _> = tensors
            .into_iter()
            .filter(|(n, _)| !is_adapter_param(n))
            .collect();
        checkpoint::load_into(&mut model, &base)?;
    }
    if req.mode.needs_adapters() {
        inject(&mut model, &config.lora, &mut rng)?;
    }
    let policy = apply_policy(&mut model, req.mode)?;
    let report = train(&mut model, &policy, &train_set, &test_set, &config.train)?;
    checkpoint::save_model(&req.out_dir.join(CHECKPOINT_DIR), &model, Selection::All)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint_dir: PathBuf,
    pub data_dir: PathBuf,
    pub encrypt_key: Option<u64>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub samples: usize,
}

/// Test-split accuracy of a checkpoint written by [`run_train`].
pub fn run_eval(req: &EvalRequest) -> Result<EvalOutcome> {
    let mut config = ExperimentConfig::load(&req.checkpoint_dir.join(CONFIG_FILE))?;
    if req.limit.is_some() {
        config.data.test_limit = req.limit;
    }
    let vit = config.resolve_vit(false)?;
    let spec = config.preprocess_spec(&vit, req.encrypt_key)?;
    let records = load_split(&req.data_dir, Split::Test, &config.test_subset())?;
    let pre = Preprocessor::new(spec)?;
    let accuracy = match config.train.precision {
        Precision::F32 => eval_typed::<f32>(&config, &req.checkpoint_dir, &pre, &records)?,
        Precision::F64 => eval_typed::<f64>(&config, &req.checkpoint_dir, &pre, &records)?,
    };
    Ok(EvalOutcome {
        accuracy,
        samples: records.len(),
    })
}

fn eval_typed<T: Scalar>(
    config: &ExperimentConfig,
    dir: &Path,
    pre: &Preprocessor,
    records: &[crate::data::Cifar10Record],
) -> Result<f64> {
    let vit = config
        .vit
        .ok_or_else(|| Error::Config("checkpoint config lacks vit".into()))?;
    let tensors = checkpoint::load::<T>(dir)?;
    let mut model = ViTModel::<T>::zeros(vit)?;
    if let Some(base) = &config.pretrained {
        let base: indexmap::IndexMap<_, _> = checkpoint::load::<T>(base)?
            .into_iter()
            .filter(|(n, _)| !is_adapter_param(n))
            .collect();
        checkpoint::load_into(&mut model, &base)?;
    }
    if tensors.keys().any(|n| is_adapter_param(n)) {
        inject(&mut model, &config.lora, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    checkpoint::load_into(&mut model, &tensors)?;
    evaluate(&model, &pre.prepare::<T>(records)?)
}
