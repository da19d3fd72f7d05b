use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::{Task, Variant};
use crate::analysis::JitterTrace;
use crate::error::{MbjError, Result};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss_batch: f64,
    pub loss_memory: f64,
    pub top1: Option<f64>,
    /// `None` for classes absent from the evaluation set.
    pub per_class_top1: Vec<Option<f64>>,
    pub bank_occupancy_per_class: Vec<usize>,
    /// Images drawn per class by the data loader this epoch.
    pub loader_class_counts: Vec<usize>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub rank1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub task: Task,
    pub variant: Variant,
    pub epochs: Vec<EpochMetrics>,
    pub traces: Vec<JitterTrace>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn new(task: Task, variant: Variant) -> Self {
        RunRecord {
            task,
            variant,
            epochs: Vec::new(),
            traces: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Last epoch of `phase`, if it ran.
    pub fn last_of_phase(&self, phase: u8) -> Option<&EpochMetrics> {
        self.epochs.iter().rev().find(|e| e.phase == phase)
    }

    pub fn extend(&mut self, other: RunRecord) {
        self.epochs.extend(other.epochs);
        self.traces.extend(other.traces);
        self.warnings.extend(other.warnings);
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(&self.epochs, path)
    }
}

pub fn write_jsonl(epochs: &[EpochMetrics], path: &Path) -> Result<()> {
    let io = |e| MbjError::io(path, e);
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for e in epochs {
        let line = serde_json::to_string(e).map_err(|e| MbjError::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = std::fs::File::open(path).map_err(|e| MbjError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MbjError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MbjError::Format {
            path: path.into(),
            reason: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}
