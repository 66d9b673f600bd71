//! JSON-lines metric records, one per evaluation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExpError;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct LossRecord {
    pub policy: f64,
    pub critic: f64,
    pub entropy: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub per_task_return: Vec<f64>,
    pub per_task_success: Vec<f64>,
    pub avg_return: f64,
    pub avg_success: f64,
    pub losses: LossRecord,
    /// Damped near-degenerate Gram-Schmidt columns so far.
    pub gs_degeneracies: u64,
    /// max |V^T V - I| over the evaluation batch (0 when GS is off).
    pub gs_residual_max: f64,
    /// Cosine-similarity regularizer on the evaluation batch, when active.
    pub reg_value: Option<f64>,
}

impl MetricRecord {
    pub fn averaged(mut self) -> Self {
        let n = self.per_task_return.len().max(1) as f64;
        self.avg_return = self.per_task_return.iter().sum::<f64>() / n;
        self.avg_success = self.per_task_success.iter().sum::<f64>() / n;
        self
    }
}

pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<(), ExpError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| ExpError::Io(e.to_string()))?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| ExpError::Io(e.to_string()))?;
    f.write_all(out.as_bytes())
        .map_err(|e| ExpError::Io(e.to_string()))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>, ExpError> {
    let body = std::fs::read_to_string(path).map_err(|e| ExpError::Io(e.to_string()))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ExpError::Io(e.to_string())))
        .collect()
}
