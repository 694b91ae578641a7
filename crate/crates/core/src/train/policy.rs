use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::is_adapter_param;
use crate::scalar::Scalar;
use crate::vit::ViTModel;

/// Which parameters a fine-tuning run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// Every parameter.
    Full,
    /// Adapters and the classification head.
    MeLo,
    /// Adapters, the classification head and the patch embedding.
    Ours,
}

impl TuningMode {
    pub const ALL: [TuningMode; 3] = [TuningMode::Full, TuningMode::MeLo, TuningMode::Ours];

    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Full => "full",
            TuningMode::MeLo => "melo",
            TuningMode::Ours => "ours",
        }
    }

    pub fn needs_adapters(self) -> bool {
        !matches!(self, TuningMode::Full)
    }

    /// Trainable name patterns; `prefix.*` matches names starting with `prefix.`.
    pub fn patterns(self) -> &'static [&'static str] {
        match self {
            TuningMode::Full => &["*"],
            TuningMode::MeLo => &["lora.*", "head.*"],
            TuningMode::Ours => &["lora.*", "head.*", "patch_embed.*"],
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(TuningMode::Full),
            "melo" => Ok(TuningMode::MeLo),
            "ours" => Ok(TuningMode::Ours),
            _ => Err(Error::Parameter(format!(
                "unknown mode {s:?} (expected full, melo or ours)"
            ))),
        }
    }
}

fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some("") => true,
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

/// A mode resolved against a concrete registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuningPolicy {
    pub mode: TuningMode,
    pub patterns: Vec<String>,
    /// Registry names the policy made trainable, in registry order.
    pub trainable: Vec<String>,
}

impl TuningPolicy {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| pattern_matches(p, name))
    }
}

/// Sets `requires_grad` on every registry entry according to `mode`.
pub fn apply_policy<T: Scalar>(model: &mut ViTModel<T>, mode: TuningMode) -> Result<TuningPolicy> {
    if mode.needs_adapters() && !model.names().any(is_adapter_param) {
        return Err(Error::State(format!(
            "mode {mode} needs adapters; inject them first"
        )));
    }
    let patterns: Vec<String> = mode.patterns().iter().map(|s| s.to_string()).collect();
    let mut trainable = Vec::new();
    for (name, t) in model.iter_mut() {
        let on = patterns.iter().any(|p| pattern_matches(p, name));
        t.set_requires_grad(on);
        if on {
            trainable.push(name.to_string());
        }
    }
    Ok(TuningPolicy {
        mode,
        patterns,
        trainable,
    })
}
