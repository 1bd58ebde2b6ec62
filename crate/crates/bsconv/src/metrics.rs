//! Segmentation quality metrics from a confusion matrix.
//!
//! Conventions: sites labeled with the ignore value contribute nothing;
//! a class absent from both prediction and ground truth is excluded from
//! the mIoU mean (its entry is `None`); mean class accuracy averages
//! recall over classes present in the ground truth.

use crate::error::NetError;
use crate::mat::Mat;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Row-wise argmax of a logit matrix, as class labels.
pub fn argmax_predictions(logits: &Mat) -> Vec<i32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as i32
        })
        .collect()
}

pub fn compute_metrics(
    pred: &[i32],
    truth: &[i32],
    num_classes: usize,
    ignore_label: i32,
) -> Result<Metrics, NetError> {
    if pred.len() != truth.len() {
        return Err(NetError::LengthMismatch(pred.len(), truth.len()));
    }
    let c = num_classes;
    let mut confusion = vec![0u64; c * c];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == ignore_label {
            continue;
        }
        assert!(
            t >= 0 && (t as usize) < c && p >= 0 && (p as usize) < c,
            "label {t}/{p} outside 0..{c}"
        );
        confusion[t as usize * c + p as usize] += 1;
    }

    let total: u64 = confusion.iter().sum();
    let trace: u64 = (0..c).map(|k| confusion[k * c + k]).sum();
    let acc = if total == 0 { 0.0 } else { trace as f64 / total as f64 };

    let mut per_class_iou = Vec::with_capacity(c);
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_n = 0usize;
    for k in 0..c {
        let tp = confusion[k * c + k];
        let in_truth: u64 = (0..c).map(|p| confusion[k * c + p]).sum();
        let in_pred: u64 = (0..c).map(|t| confusion[t * c + k]).sum();
        let union = in_truth + in_pred - tp;
        if union == 0 {
            per_class_iou.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class_iou.push(Some(iou));
            iou_sum += iou;
            iou_n += 1;
        }
        if in_truth > 0 {
            recall_sum += tp as f64 / in_truth as f64;
            recall_n += 1;
        }
    }
    let miou = if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 };
    let macc = if recall_n == 0 { 0.0 } else { recall_sum / recall_n as f64 };
    Ok(Metrics { miou, macc, acc, per_class_iou })
}
