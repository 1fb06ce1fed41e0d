//! Per-channel linear interpolation, the reference imputer.

use crate::error::{Result, TsdmError};
use crate::matrix::{MeasurementMatrix, ObservabilityMask};

/// Fills untrusted entries by linear interpolation between the nearest
/// trusted neighbours, holding the edge value past either end. A channel
/// with no trusted entry is filled with `channel_means[m]`.
pub fn baseline_interpolate(
    y0: &MeasurementMatrix,
    mask: &ObservabilityMask,
    channel_means: &[f64],
) -> Result<MeasurementMatrix> {
    if y0.shape() != mask.shape() {
        return Err(TsdmError::invalid("mask shape does not match the window"));
    }
    if channel_means.len() != y0.rows() {
        return Err(TsdmError::invalid(format!(
            "{} fallback means for {} channels",
            channel_means.len(),
            y0.rows()
        )));
    }
    let mut out = y0.clone();
    let cols = y0.cols();
    for (m, &fallback) in channel_means.iter().enumerate() {
        let known: Vec<usize> = (0..cols).filter(|&t| mask.get(m, t)).collect();
        let row = out.row_mut(m);
        let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
            row.fill(fallback);
            continue;
        };
        let (head, tail) = (row[first], row[last]);
        row[..first].fill(head);
        row[last + 1..].fill(tail);
        for pair in known.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (row[a], row[b]);
            for (t, v) in row.iter_mut().enumerate().take(b).skip(a + 1) {
                let w = (t - a) as f64 / (b - a) as f64;
                *v = va + w * (vb - va);
            }
        }
    }
    Ok(out)
}
