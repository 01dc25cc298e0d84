//! Confusion-matrix accounting and segmentation metrics: accuracy,
//! per-class precision/recall/F1, IOU and Dice, and their class means.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::raster::{Class, LabelMask, CLASS_COUNT};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvaluationError {
    #[error("mask dimensions differ: {gt:?} vs {pred:?}")]
    DimensionMismatch { gt: (usize, usize), pred: (usize, usize) },
    #[error("validity mask has {found} entries, expected {expected}")]
    MaskLength { expected: usize, found: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASS_COUNT]; CLASS_COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASS_COUNT).map(|c| self.counts[c][c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }
}

/// Counts `(gt, pred)` pairs over pixels where `valid` is set (all pixels
/// when `valid` is `None`).
pub fn confusion(gt: &LabelMask, pred: &LabelMask, valid: Option<&[bool]>) -> Result<ConfusionMatrix, EvaluationError> {
    if gt.width() != pred.width() || gt.height() != pred.height() {
        return Err(EvaluationError::DimensionMismatch {
            gt: (gt.width(), gt.height()),
            pred: (pred.width(), pred.height()),
        });
    }
    let n = gt.classes().len();
    if let Some(v) = valid {
        if v.len() != n {
            return Err(EvaluationError::MaskLength { expected: n, found: v.len() });
        }
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&g, &p)) in gt.classes().iter().zip(pred.classes()).enumerate() {
        if valid.is_none_or(|v| v[i]) {
            cm.counts[g as usize][p as usize] += 1;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    /// Whether the class occurs in ground truth or prediction.
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: [ClassMetrics; CLASS_COUNT],
    pub mean_precision: f64,
    pub mean_f1: f64,
    pub miou: f64,
    pub mdc: f64,
    pub evaluated_pixels: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from a confusion matrix. 0/0 forms are 0 and classes absent
/// from both ground truth and prediction are left out of the means.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvaluationError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvaluationError::EmptyMatrix);
    }
    let mut per_class = [ClassMetrics::default(); CLASS_COUNT];
    for (c, m) in per_class.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        let fp: u64 = (0..CLASS_COUNT).filter(|&r| r != c).map(|r| cm.counts[r][c]).sum();
        let fn_: u64 = (0..CLASS_COUNT).filter(|&p| p != c).map(|p| cm.counts[c][p]).sum();
        m.precision = ratio(tp, tp + fp);
        m.recall = ratio(tp, tp + fn_);
        m.f1 =
            if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
        m.iou = ratio(tp, tp + fp + fn_);
        m.dice = ratio(2 * tp, 2 * tp + fp + fn_);
        m.present = tp + fp + fn_ > 0;
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.present).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        mean_precision: mean(|m| m.precision),
        mean_f1: mean(|m| m.f1),
        miou: mean(|m| m.iou),
        mdc: mean(|m| m.dice),
        per_class,
        evaluated_pixels: total,
    })
}

impl MetricsReport {
    /// Single-line `key=value` record.
    pub fn to_record(&self) -> String {
        let mut s = format!(
            "accuracy={:.6} mean_precision={:.6} mean_f1={:.6} miou={:.6} mdc={:.6} evaluated_pixels={}",
            self.accuracy, self.mean_precision, self.mean_f1, self.miou, self.mdc, self.evaluated_pixels
        );
        for (c, m) in self.per_class.iter().enumerate() {
            let name = Class::ALL[c].name();
            let _ = write!(
                s,
                " {name}_precision={:.6} {name}_recall={:.6} {name}_f1={:.6} {name}_iou={:.6} {name}_dice={:.6}",
                m.precision, m.recall, m.f1, m.iou, m.dice
            );
        }
        s
    }

    /// Looks up one value in a record produced by [`to_record`](Self::to_record).
    pub fn record_value(record: &str, key: &str) -> Option<f64> {
        record.split_whitespace().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1", "iou", "dice")?;
        for (c, m) in self.per_class.iter().enumerate() {
            let name = if m.present { Class::ALL[c].name().to_string() } else { format!("({})", Class::ALL[c].name()) };
            writeln!(
                f,
                "{name:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                m.precision, m.recall, m.f1, m.iou, m.dice
            )?;
        }
        writeln!(
            f,
            "{:<12} {:>9.4} {:>9} {:>9.4} {:>9.4} {:>9.4}",
            "mean", self.mean_precision, "", self.mean_f1, self.miou, self.mdc
        )?;
        write!(f, "accuracy {:.4} over {} pixels", self.accuracy, self.evaluated_pixels)
    }
}
