//! One-pass evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::pipeline::BBox;

/// IoU thresholds `0.00, 0.05, …, 1.00`.
pub const IOU_THRESHOLDS: usize = 21;
pub const PRECISION_RADIUS: f64 = 20.0;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeMetrics {
    pub success_auc: f64,
    pub precision_at_20: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{predicted} predicted boxes but {truth} ground-truth boxes")]
pub struct LengthMismatch {
    pub predicted: usize,
    pub truth: usize,
}

pub fn iou_threshold(k: usize) -> f64 {
    k as f64 / (IOU_THRESHOLDS - 1) as f64
}

pub fn ope_metrics(predicted: &[BBox], truth: &[BBox]) -> Result<OpeMetrics, LengthMismatch> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let n = predicted.len() as f64;
    let ious: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| iou(p, t)).collect();
    let success_auc = (0..IOU_THRESHOLDS)
        .map(|k| {
            let th = iou_threshold(k);
            ious.iter().filter(|&&v| v > th).count() as f64 / n
        })
        .sum::<f64>()
        / IOU_THRESHOLDS as f64;
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| center_error(p, t) <= PRECISION_RADIUS)
        .count();
    Ok(OpeMetrics {
        success_auc,
        precision_at_20: hits as f64 / n,
    })
}
