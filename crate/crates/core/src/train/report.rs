use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policy::TuningMode;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "mode,trainable_params,total_params,epochs,final_loss,accuracy,encrypted_flag,seed";

/// Summary of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: TuningMode,
    /// Epochs started, including one cut short by `max_steps`.
    pub epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of the first batch, before any update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Floats held by the optimizer (two moments per trainable element).
    pub optimizer_state_floats: usize,
    pub encrypted: bool,
    /// Hash of the encryption key; the key itself is never recorded.
    pub key_fingerprint: Option<String>,
    pub seed: u64,
    /// Wall-clock start, seconds since the Unix epoch. Excluded from
    /// reproducibility comparisons.
    pub started_unix: Option<u64>,
}

impl RunReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode,
            self.trainable_params,
            self.total_params,
            self.epochs,
            self.final_loss,
            self.accuracy,
            self.encrypted,
            self.seed
        )
    }

    /// Appends one row, writing the header first if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        text.push_str(&self.csv_row());
        text.push('\n');
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
