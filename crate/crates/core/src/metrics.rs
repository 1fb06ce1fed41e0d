//! Recovery and detection scores.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsdmError};
use crate::matrix::{FlagMap, MeasurementMatrix, ObservabilityMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub weighted_rmse: f64,
    /// RMSE over the entries that were missing or flagged.
    pub masked_rmse: f64,
    pub detection_precision: f64,
    pub detection_recall: f64,
    /// Wall time. Not serialized, so written reports stay reproducible.
    #[serde(skip)]
    pub runtime_ms: u64,
}

fn check_pair(truth: &MeasurementMatrix, recovered: &MeasurementMatrix) -> Result<()> {
    truth.check_same_shape(recovered)
}

/// `√((1/(S·T))·Σ_i m_i·Σ_j (s_ij − s̃_ij)²)` over `S` channels and `T` samples.
pub fn weighted_rmse(
    truth: &MeasurementMatrix,
    recovered: &MeasurementMatrix,
    weights: &[f64],
) -> Result<f64> {
    check_pair(truth, recovered)?;
    let (s, t) = truth.shape();
    if weights.len() != s {
        return Err(TsdmError::invalid(format!(
            "{} weights for {s} channels",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(TsdmError::invalid(
            "channel weights must be finite and nonnegative",
        ));
    }
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let row: f64 = truth
            .row(i)
            .iter()
            .zip(recovered.row(i))
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        total += w * row;
    }
    Ok((total / (s * t) as f64).sqrt())
}

/// Unit weights.
pub fn rmse(truth: &MeasurementMatrix, recovered: &MeasurementMatrix) -> Result<f64> {
    weighted_rmse(truth, recovered, &vec![1.0; truth.rows()])
}

/// RMSE restricted to entries where `mask` is `false`; zero when none are.
pub fn masked_rmse(
    truth: &MeasurementMatrix,
    recovered: &MeasurementMatrix,
    mask: &ObservabilityMask,
) -> Result<f64> {
    check_pair(truth, recovered)?;
    if mask.shape() != truth.shape() {
        return Err(TsdmError::invalid("mask shape does not match the windows"));
    }
    let (sum, count) = truth
        .values()
        .iter()
        .zip(recovered.values())
        .zip(mask.bits())
        .filter(|(_, &keep)| !keep)
        .fold((0.0, 0usize), |(s, c), ((a, b), _)| {
            (s + (a - b).powi(2), c + 1)
        });
    Ok(if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    })
}

/// `(precision, recall)` of `flagged` against `truth`. With no flags,
/// precision is 1 only when there is also nothing to find; with nothing to
/// find, recall is 1.
pub fn detection_metrics(flagged: &FlagMap, truth: &FlagMap) -> Result<(f64, f64)> {
    if flagged.shape() != truth.shape() {
        return Err(TsdmError::invalid("flag maps differ in shape"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&f, &t) in flagged.bits().iter().zip(truth.bits()) {
        match (f, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        if tp + fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    Ok((precision, recall))
}
