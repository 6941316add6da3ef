//! Confusion matrices, IoU, pseudo-label diagnostics, and the sealed
//! ground-truth store for unlabeled scenes.
//!
//! [`SealedLabels`] can only be read inside this module: training code may
//! hand it around to the diagnostic functions below but never sees a label.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::losses::uniform_cross_entropy;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Rows are ground truth, columns are predictions.
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truths: &[Label], predictions: &[Label], mask: Option<&[bool]>) -> Result<()> {
        Error::check_len("predictions", truths.len(), predictions.len())?;
        if let Some(m) = mask {
            Error::check_len("mask", truths.len(), m.len())?;
        }
        for (i, (&t, &p)) in truths.iter().zip(predictions).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let (t, p) = (usize::from(t), usize::from(p));
            if t >= self.classes || p >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "class index out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "confusion matrix sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }

    pub fn iou(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let denom = self.row_sum(c) + self.col_sum(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        // mean over classes present in the ground truth
        let present: Vec<f64> = (0..self.classes)
            .filter(|&c| self.row_sum(c) > 0)
            .filter_map(|c| per_class[c])
            .collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class, miou }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Ground truth of unlabeled training scenes.
#[derive(Debug, Clone, Default)]
pub struct SealedLabels {
    scenes: Vec<Vec<Label>>,
}

impl SealedLabels {
    pub(crate) fn seal(scenes: Vec<Vec<Label>>) -> Self {
        Self { scenes }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Truth for selected points of one scene; `None` entries stay unknown.
    pub fn view(&self, scene: usize, points: &[Option<u32>]) -> SealedTruth {
        let truth = &self.scenes[scene];
        SealedTruth {
            labels: points.iter().map(|p| p.map(|i| truth[i as usize])).collect(),
        }
    }

}

/// Opaque per-point truth aligned with some cloud; readable only by metrics.
#[derive(Debug, Clone)]
pub struct SealedTruth {
    labels: Vec<Option<Label>>,
}

impl SealedTruth {
    /// Truth for `n` points none of which is tracked.
    pub fn unknown(n: usize) -> Self {
        Self { labels: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pseudo-label bookkeeping over some set of eligible points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RetentionStats {
    pub eligible: u64,
    pub retained: u64,
    pub correct: u64,
}

impl RetentionStats {
    pub fn rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.retained as f64 / self.eligible as f64
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.retained > 0).then(|| self.correct as f64 / self.retained as f64)
    }

    pub fn merge(&mut self, other: RetentionStats) {
        self.eligible += other.eligible;
        self.retained += other.retained;
        self.correct += other.correct;
    }
}

fn retention_counts(eligible: &[bool], retained: &[bool], pseudo: &[Label], truth: impl Fn(usize) -> Option<Label>) -> RetentionStats {
    let mut s = RetentionStats::default();
    for i in 0..eligible.len() {
        if eligible[i] {
            s.eligible += 1;
        }
        if retained[i] {
            s.retained += 1;
            if truth(i) == Some(pseudo[i]) {
                s.correct += 1;
            }
        }
    }
    s
}

/// Retention rate and accuracy of pseudo-labels against known truths.
pub fn retention_and_accuracy(eligible: &[bool], retained: &[bool], pseudo: &[Label], truths: &[Label]) -> Result<RetentionStats> {
    for (what, n) in [("retained", retained.len()), ("pseudo", pseudo.len()), ("truths", truths.len())] {
        Error::check_len(what, eligible.len(), n)?;
    }
    Ok(retention_counts(eligible, retained, pseudo, |i| Some(truths[i])))
}

pub fn sealed_retention(eligible: &[bool], retained: &[bool], pseudo: &[Label], truth: &SealedTruth) -> Result<RetentionStats> {
    for (what, n) in [("retained", retained.len()), ("pseudo", pseudo.len()), ("truths", truth.len())] {
        Error::check_len(what, eligible.len(), n)?;
    }
    Ok(retention_counts(eligible, retained, pseudo, |i| truth.labels[i]))
}

/// Running sum for the certainty of incorrect predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CertaintyAccumulator {
    pub sum: f64,
    pub count: u64,
}

impl CertaintyAccumulator {
    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn merge(&mut self, other: CertaintyAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }
}

fn incorrect_certainty(probs: &Matrix, predictions: &[Label], truth: impl Fn(usize) -> Option<Label>) -> CertaintyAccumulator {
    let mut acc = CertaintyAccumulator::default();
    for (i, &p) in predictions.iter().enumerate() {
        if truth(i).is_some_and(|t| t != p) {
            acc.sum += uniform_cross_entropy(probs.row(i));
            acc.count += 1;
        }
    }
    acc
}

/// Mean cross-entropy against the uniform prior over mispredicted points;
/// `None` when every prediction is correct.
pub fn certainty_of_incorrect(probs: &Matrix, predictions: &[Label], truths: &[Label]) -> Result<Option<f64>> {
    Error::check_len("predictions", probs.rows(), predictions.len())?;
    Error::check_len("truths", probs.rows(), truths.len())?;
    Ok(incorrect_certainty(probs, predictions, |i| Some(truths[i])).value())
}

pub fn sealed_incorrect_certainty(probs: &Matrix, predictions: &[Label], truth: &SealedTruth) -> Result<CertaintyAccumulator> {
    Error::check_len("predictions", probs.rows(), predictions.len())?;
    Error::check_len("truths", probs.rows(), truth.len())?;
    Ok(incorrect_certainty(probs, predictions, |i| truth.labels[i]))
}

pub const IOU_CSV_HEADER: &str = "epoch,student,class,iou";

/// CSV rows (no header) for one student's per-class IoU at one epoch.
pub fn iou_csv_rows(epoch: usize, student: usize, report: &IouReport) -> String {
    let mut out = String::new();
    for (c, iou) in report.per_class.iter().enumerate() {
        let v = iou.map_or(String::new(), |v| format!("{v}"));
        let _ = writeln!(out, "{epoch},{student},{c},{v}");
    }
    out
}
