//! Mean intersection-over-union and expected calibration error.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, IGNORE};
use crate::error::{Error, Result};

/// Default number of equal-width calibration bins.
pub const ECE_BINS: usize = 15;

/// Pixel confusion counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not [`IGNORE`].
    pub fn accumulate(&mut self, truth: &LabelMask, pred: &LabelMask) {
        assert_eq!((truth.height(), truth.width()), (pred.height(), pred.width()), "mask sizes differ");
        for (&t, &p) in truth.classes().iter().zip(pred.classes()) {
            if t == IGNORE {
                continue;
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

/// Per-class IoU (None for classes with empty union) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("mIoU of an empty confusion matrix".into()));
    }
    let c = cm.num_classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|j| cm.get(j, k)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(IouReport { miou: valid.iter().sum::<f64>() / valid.len() as f64, per_class })
}

/// Equal-width confidence bins over (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub counts: Vec<u64>,
    pub sum_confidence: Vec<f64>,
    pub sum_correct: Vec<f64>,
}

impl CalibrationBins {
    pub fn new(bins: usize) -> Self {
        Self { counts: vec![0; bins], sum_confidence: vec![0.0; bins], sum_correct: vec![0.0; bins] }
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin `b` holds confidences in (b/B, (b+1)/B].
    pub fn add(&mut self, confidence: f64, correct: bool) {
        let b = self.num_bins();
        let idx = ((confidence * b as f64).ceil() as usize).clamp(1, b) - 1;
        self.counts[idx] += 1;
        self.sum_confidence[idx] += confidence;
        self.sum_correct[idx] += correct as u8 as f64;
    }

    pub fn merge(&mut self, other: &CalibrationBins) {
        for i in 0..self.num_bins() {
            self.counts[i] += other.counts[i];
            self.sum_confidence[i] += other.sum_confidence[i];
            self.sum_correct[i] += other.sum_correct[i];
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Σ_b (n_b / N) · |acc_b − conf_b|.
    pub fn ece(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::UndefinedMetric("ECE of zero predictions".into()));
        }
        let mut e = 0.0;
        for i in 0..self.num_bins() {
            let nb = self.counts[i];
            if nb == 0 {
                continue;
            }
            let gap = (self.sum_correct[i] - self.sum_confidence[i]).abs() / nb as f64;
            e += nb as f64 / n as f64 * gap;
        }
        Ok(e)
    }
}

/// ECE of (confidence, correct) pairs with `bins` equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    assert_eq!(confidences.len(), correct.len());
    let mut cb = CalibrationBins::new(bins);
    confidences.iter().zip(correct).for_each(|(&p, &c)| cb.add(p, c));
    cb.ece()
}
