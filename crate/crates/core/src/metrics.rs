//! Thresholding and the per-sample accuracy, Dice and IoU means.
//!
//! Samples where both prediction and ground truth are empty
//! (`TP + FP + FN = 0`) score Dice = IoU = 1.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default cutoff on the 0..255 scale.
pub const DEFAULT_THRESHOLD: f64 = 190.0;

/// Probability equivalent of a cutoff on the 0..255 scale.
pub fn probability_cutoff(threshold: f64) -> f64 {
    threshold / 255.0
}

/// Binarize one already-scaled value: below `threshold` is 0, otherwise 255.
pub fn threshold_scaled(value: f64, threshold: f64) -> u8 {
    if value < threshold {
        0
    } else {
        255
    }
}

/// Scale probabilities by 255 (no rounding) and binarize at `threshold`.
pub fn threshold_mask<T: Scalar>(probs: &[T], threshold: f64) -> Result<Vec<u8>> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = p.as_f64();
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::usage(format!("probability {p} at index {i} is outside [0, 1]")));
            }
            Ok(threshold_scaled(p * 255.0, threshold))
        })
        .collect()
}

/// A binary mask; `true` is foreground (white).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{} mask values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(BinaryMask { height, width, data })
    }

    /// From 8-bit pixels: nonzero is foreground.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&v| v != 0).collect())
    }

    /// From reals: values >= 0.5 are foreground.
    pub fn from_reals<T: Scalar>(height: usize, width: usize, values: &[T]) -> Result<Self> {
        Self::new(height, width, values.iter().map(|v| v.as_f64() >= 0.5).collect())
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::dim(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub accuracy: f64,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean_accuracy: f64,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

/// Per-sample means over the given confusion counts.
pub fn segmentation_metrics(counts: &[ConfusionCounts]) -> Result<MetricsReport> {
    if counts.is_empty() {
        return Err(Error::usage("metrics need at least one sample"));
    }
    if let Some(i) = counts.iter().position(|c| c.total() == 0) {
        return Err(Error::usage(format!("sample {i} has no pixels")));
    }
    let samples: Vec<SampleMetrics> = counts
        .iter()
        .map(|c| SampleMetrics {
            accuracy: c.accuracy(),
            dice: c.dice(),
            iou: c.iou(),
        })
        .collect();
    let n = samples.len() as f64;
    Ok(MetricsReport {
        mean_accuracy: samples.iter().map(|s| s.accuracy).sum::<f64>() / n,
        mean_dice: samples.iter().map(|s| s.dice).sum::<f64>() / n,
        mean_iou: samples.iter().map(|s| s.iou).sum::<f64>() / n,
        samples,
    })
}

/// One row of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub split: String,
    pub epoch: usize,
    pub report: MetricsReport,
}

/// `split,epoch,MA,MDC,MIoU` with six decimals, sorted by split then epoch.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.split.cmp(&b.split).then(a.epoch.cmp(&b.epoch)));
    let mut out = String::from("split,epoch,MA,MDC,MIoU\n");
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.split, r.epoch, r.report.mean_accuracy, r.report.mean_dice, r.report.mean_iou
        );
    }
    out
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}
