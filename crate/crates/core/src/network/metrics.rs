//! Classification accuracy and part-segmentation IoU.

use crate::error::{Error, Result};

/// Fraction of predictions equal to the truth.
pub fn instance_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean part IoU of one shape over the parts it can have.
///
/// A part missing from both prediction and truth scores 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("prediction and truth lengths differ"));
    }
    if parts.is_empty() {
        return Err(Error::invalid("shape has no parts"));
    }
    let total: f64 = parts
        .iter()
        .map(|&part| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &t) in pred.iter().zip(truth) {
                let (ip, it) = (p == part, t == part);
                inter += (ip && it) as usize;
                union += (ip || it) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / parts.len() as f64)
}

/// Average of per-shape IoUs.
pub fn mean_iou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::invalid("mean IoU of no shapes"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
