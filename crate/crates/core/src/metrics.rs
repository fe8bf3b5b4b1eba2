//! Accuracy, calibration error, NLL and reliability tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tape};

pub const DEFAULT_BINS: usize = 15;

/// One equal-width confidence bin over `(lower, upper]` (the first bin also
/// takes confidence 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub accuracy: f64,
    /// Fraction in `[0, 1]`.
    pub ece: f64,
    pub ece_percent: f64,
    /// Mean `−ln p(y)`.
    pub nll: f64,
    /// `nll × 100`, reported on the same scale as ECE percent.
    pub nll_percent: f64,
    pub bins: Vec<Bin>,
}

/// Lowest index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Report from per-sample class probabilities.
pub fn calibration(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    if probs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("calibration", &[probs.len()], &[labels.len()]));
    }
    if bins == 0 {
        return Err(Error::Config("calibration needs at least one bin".into()));
    }
    let n = probs.len();
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    let mut hits = 0usize;
    let mut nll = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::LabelOutOfRange { label: y, classes: p.len() });
        }
        let pred = argmax(p);
        let conf = p[pred];
        let b = bin_index(conf, bins);
        conf_sum[b] += conf;
        counts[b] += 1;
        if pred == y {
            correct[b] += 1;
            hits += 1;
        }
        nll -= p[y].ln();
    }
    let bins: Vec<Bin> = (0..bins)
        .map(|b| {
            let c = counts[b];
            let (mean_confidence, accuracy) = if c == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / c as f64, correct[b] as f64 / c as f64)
            };
            Bin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                mean_confidence,
                accuracy,
                count: c,
            }
        })
        .collect();
    let ece = ece_from_bins(&bins, n);
    let nll = nll / n as f64;
    Ok(CalibrationReport {
        n,
        accuracy: hits as f64 / n as f64,
        ece,
        ece_percent: ece * 100.0,
        nll,
        nll_percent: nll * 100.0,
        bins,
    })
}

/// `Σ (count/n)·|accuracy − confidence|`.
pub fn ece_from_bins(bins: &[Bin], n: usize) -> f64 {
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

pub fn calibration_from_logits(logits: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax_row(z)).collect();
    calibration(&probs, labels, bins)
}

/// Eval-mode logits for the whole dataset, in dataset order.
pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for idx in Batches::sequential(data.len(), batch_size) {
        let (x, _) = data.gather(&idx)?;
        let mut tape = Tape::<T>::new();
        let xv = tape.constant(x.cast());
        let fwd = model.forward_frozen(&mut tape, xv)?;
        let logits = tape.value(fwd.logits)?;
        let j = logits.shape()[1];
        out.extend(logits.data().chunks(j).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, bins: usize, batch_size: usize) -> Result<CalibrationReport> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let logits = predict(model, data, batch_size)?;
    calibration_from_logits(&logits, &data.labels, bins)
}

/// One row of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
    /// `confidence − accuracy`; positive means overconfident.
    pub gap: f64,
}

pub fn reliability_diagram(report: &CalibrationReport) -> Vec<ReliabilityRow> {
    report
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| ReliabilityRow {
            bin: i,
            lower: b.lower,
            upper: b.upper,
            midpoint: (b.lower + b.upper) / 2.0,
            confidence: b.mean_confidence,
            accuracy: b.accuracy,
            count: b.count,
            gap: b.mean_confidence - b.accuracy,
        })
        .collect()
}

/// ECE recomputed from diagram rows alone.
pub fn ece_from_rows(rows: &[ReliabilityRow]) -> f64 {
    let n: usize = rows.iter().map(|r| r.count).sum();
    rows.iter()
        .map(|r| r.count as f64 / n as f64 * (r.accuracy - r.confidence).abs())
        .sum()
}

pub fn write_reliability_csv(path: impl AsRef<Path>, rows: &[ReliabilityRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reliability_csv(path: impl AsRef<Path>) -> Result<Vec<ReliabilityRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ReliabilityRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}
