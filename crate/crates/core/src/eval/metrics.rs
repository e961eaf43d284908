use serde::Serialize;

use crate::error::Result;
use crate::volio::MaskVolume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub precision: f64,
    pub sensitivity: f64,
}

/// Voxel confusion counts of a binary prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_masks(pred: &[u8], gt: &[u8]) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// Overlap metrics. Empty prediction and empty ground truth score 1 on all
/// three; an empty prediction against a non-empty ground truth scores 0.
pub fn seg_metrics(pred: &MaskVolume, gt: &MaskVolume) -> Result<SegMetrics> {
    pred.geometry().ensure_same(gt.geometry())?;
    Ok(seg_metrics_from(Confusion::from_masks(pred.data(), gt.data())))
}

pub fn seg_metrics_from(c: Confusion) -> SegMetrics {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 {
        return SegMetrics {
            dsc: 1.0,
            precision: 1.0,
            sensitivity: 1.0,
        };
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    SegMetrics {
        dsc: 2.0 * tp / (2.0 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        sensitivity: ratio(tp, tp + fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClsMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

/// Binary classification metrics at threshold 0.5 (`p >= 0.5` is positive).
pub fn cls_metrics(probs: &[f64], labels: &[u8]) -> ClsMetrics {
    assert_eq!(probs.len(), labels.len(), "probs/labels length mismatch");
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= 0.5, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut undefined = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            undefined = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_);
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        undefined = true;
        0.0
    };
    ClsMetrics {
        accuracy,
        precision,
        sensitivity,
        specificity,
        f1,
        undefined,
    }
}

/// Arithmetic mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
