//! Precision-recall curves, average precision and its class mean.
//!
//! AP is the exact area under the monotone precision envelope: each point's
//! precision is replaced by the maximum precision at any equal or higher
//! recall, and the envelope is integrated over the recall increments.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPrediction {
    pub score: f64,
    pub is_positive: bool,
}

impl ScoredPrediction {
    pub const fn new(score: f64, is_positive: bool) -> Self {
        Self { score, is_positive }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub class_id: usize,
    pub ap: f64,
}

/// Indices of `preds` by descending score; equal scores keep input order.
pub fn ranking(preds: &[ScoredPrediction]) -> Result<Vec<usize>> {
    if preds.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::Metric("prediction scores must be finite"));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable sort: ties stay in input order
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap_or(Ordering::Equal));
    Ok(order)
}

/// One point per prediction, walking the ranking from the top.
pub fn pr_curve(preds: &[ScoredPrediction], total_positives: usize) -> Result<Vec<PrPoint>> {
    if total_positives == 0 {
        return Err(Error::Metric("AP is undefined without ground-truth positives"));
    }
    let order = ranking(preds)?;
    let p = total_positives as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(order
        .into_iter()
        .map(|i| {
            if preds[i].is_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: tp as f64 / p,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect())
}

/// Area under the monotone precision envelope of `points`.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (pt, env) in points.iter().zip(&envelope) {
        ap += (pt.recall - prev_recall) * env;
        prev_recall = pt.recall;
    }
    ap.clamp(0.0, 1.0)
}

/// Convenience: [`pr_curve`] then [`average_precision`] for class `class_id`.
pub fn class_ap(class_id: usize, preds: &[ScoredPrediction], total_positives: usize) -> Result<ApResult> {
    let curve = pr_curve(preds, total_positives)?;
    Ok(ApResult {
        class_id,
        ap: average_precision(&curve),
    })
}

/// Arithmetic mean of per-class AP.
pub fn mean_ap(aps: &[ApResult]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Metric("mAP of an empty class list"));
    }
    Ok(aps.iter().map(|a| a.ap).sum::<f64>() / aps.len() as f64)
}
