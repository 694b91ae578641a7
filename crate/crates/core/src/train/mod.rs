//! Freeze policies, the Adam training loop and evaluation.

mod policy;
mod report;
mod trainer;

pub use policy::{apply_policy, TuningMode, TuningPolicy};
pub use report::{RunReport, CSV_HEADER};
pub use trainer::{
    argmax, evaluate, shuffle_seed, train, Precision, TrainConfig, DIVERGENCE_FACTOR,
    DIVERGENCE_PATIENCE,
};
