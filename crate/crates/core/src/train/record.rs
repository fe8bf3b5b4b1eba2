use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kd::LossBreakdown;

/// Metrics of one completed epoch. Serialized one object per line, fields
/// in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Sample-weighted means over the epoch's batches.
    pub losses: LossBreakdown,
    /// Total objective of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    /// Objective on the first training batch before any update, both
    /// networks in eval mode.
    pub initial: Option<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn new(label: impl Into<String>, seed: u64) -> Self {
        RunRecord {
            label: label.into(),
            seed,
            initial: None,
            epochs: Vec::new(),
        }
    }

    /// Epoch with the highest test accuracy; the earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, e| match best {
            Some(b) if b.test_acc >= e.test_acc => Some(b),
            _ => Some(e),
        })
    }

    pub fn best_test_acc(&self) -> f64 {
        self.best().map_or(0.0, |e| e.test_acc)
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| e.step_losses.iter().copied()).collect()
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wall_time_s = 0.0;
        }
        r
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>, label: impl Into<String>, seed: u64) -> Result<RunRecord> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = RunRecord::new(label, seed);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                r.epochs.push(serde_json::from_str(&line)?);
            }
        }
        Ok(r)
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        #[derive(Serialize)]
        struct Summary<'a> {
            label: &'a str,
            seed: u64,
            epochs: usize,
            best_epoch: Option<usize>,
            best_test_acc: f64,
            initial: &'a Option<LossBreakdown>,
        }
        let s = Summary {
            label: &self.label,
            seed: self.seed,
            epochs: self.epochs.len(),
            best_epoch: self.best().map(|e| e.epoch),
            best_test_acc: self.best_test_acc(),
            initial: &self.initial,
        };
        let text = serde_json::to_string_pretty(&s)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub best_accs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl RepeatSummary {
    pub fn from_values(seeds: Vec<u64>, best_accs: Vec<f64>) -> Self {
        let n = best_accs.len();
        let mean = best_accs.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n < 2 {
            0.0
        } else {
            (best_accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        RepeatSummary {
            seeds,
            best_accs,
            mean,
            std,
        }
    }
}

/// Runs `run` for seeds `base_seed..base_seed + n` and aggregates the best
/// test accuracies.
pub fn repeat_runs<F>(n: usize, base_seed: u64, mut run: F) -> Result<(RepeatSummary, Vec<RunRecord>)>
where
    F: FnMut(u64) -> Result<RunRecord>,
{
    if n == 0 {
        return Err(Error::Config("repeat count must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
    let records = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    let accs = records.iter().map(RunRecord::best_test_acc).collect();
    Ok((RepeatSummary::from_values(seeds, accs), records))
}
