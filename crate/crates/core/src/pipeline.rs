//! End-to-end recovery: guided Stage 1, the outlier test, and Stage 2 when
//! too much of the window is untrusted.

use std::fmt;
use std::thread;

use serde::{Deserialize, Serialize};
use tsdm_tensor::Tensor;

use crate::denoiser::{Denoiser, NoisePredictor};
use crate::error::{Result, Stage, TsdmError};
use crate::guidance::{
    detect_outliers_with, needs_stage2, stage1_recover, GuidanceConfig, OutlierReport,
    OutlierScale, DEFAULT_BRANCH_THRESHOLD, DEFAULT_OMEGA,
};
use crate::impute::{stage2_impute, ImputeConfig, DEFAULT_RESAMPLE};
use crate::matrix::{MeasurementMatrix, ObservabilityMask};
use crate::sampler::SamplerTrace;
use crate::schedule::{Subsequence, VarianceSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct TsdmConfig {
    pub guidance: GuidanceConfig,
    pub impute: ImputeConfig,
    /// Stage 2 runs when the untrusted share reaches this value.
    pub outlier_branch_threshold: f64,
    pub outlier_scale: OutlierScale,
}

/// Offset separating the Stage 2 stream from the Stage 1 stream.
const STAGE2_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

impl TsdmConfig {
    /// Defaults for the given subsequence, with every stream derived from `seed`.
    pub fn new(tau: Subsequence, seed: u64) -> Self {
        Self {
            guidance: GuidanceConfig {
                omega: DEFAULT_OMEGA,
                tau: tau.clone(),
                seed,
            },
            impute: ImputeConfig {
                resample: DEFAULT_RESAMPLE,
                tau,
                seed: seed ^ STAGE2_SEED_SALT,
                rescale_observed: false,
            },
            outlier_branch_threshold: DEFAULT_BRANCH_THRESHOLD,
            outlier_scale: OutlierScale::default(),
        }
    }

    /// The same configuration with every stream re-derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.guidance.seed = seed;
        cfg.impute.seed = seed ^ STAGE2_SEED_SALT;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.impute.validate()?;
        let t = self.outlier_branch_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(TsdmError::invalid(format!(
                "branch threshold {t} outside (0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTaken {
    Stage1Only,
    Stage1PlusStage2,
}

impl fmt::Display for StageTaken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTaken::Stage1Only => "stage1_only",
            StageTaken::Stage1PlusStage2 => "stage1_plus_stage2",
        })
    }
}

/// Recovery of one window, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedRecovery {
    pub x_tilde: Tensor,
    /// Final trust mask: passed the outlier test and was not known missing.
    pub outlier_mask: ObservabilityMask,
    pub report: OutlierReport,
    pub stage_taken: StageTaken,
    pub outlier_fraction: f64,
    pub stage1_trace: SamplerTrace,
    pub stage2_trace: Option<SamplerTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryResult {
    pub x_tilde: MeasurementMatrix,
    pub outlier_mask: ObservabilityMask,
    pub report: OutlierReport,
    pub stage_taken: StageTaken,
    pub outlier_fraction: f64,
    pub stage1_trace: SamplerTrace,
    pub stage2_trace: Option<SamplerTrace>,
}

/// Runs both stages on a normalized window. `known` marks entries that are
/// present; the rest (and any `NaN`) are zero-filled for Stage 1 and forced
/// into the untrusted set.
pub fn recover_normalized(
    model: &impl NoisePredictor,
    z: &Tensor,
    known: &ObservabilityMask,
    cfg: &TsdmConfig,
    sched: &VarianceSchedule,
) -> Result<NormalizedRecovery> {
    cfg.validate()?;
    let (m, t) = z.dims2("recover")?;
    if known.shape() != (m, t) {
        return Err(TsdmError::invalid(
            "known mask shape does not match the window",
        ));
    }
    let present = ObservabilityMask::from_fn(m, t, |i, j| {
        known.get(i, j) && !z.data()[i * t + j].is_nan()
    });
    let filled = Tensor::new(
        [m, t],
        z.data()
            .iter()
            .zip(present.bits())
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect(),
    )?;
    if !filled.is_finite() {
        return Err(TsdmError::invalid("window holds infinite values"));
    }

    let (x_prime, stage1_trace) = stage1_recover(model, &filled, &cfg.guidance, sched)
        .map_err(|e| e.in_stage(Stage::Stage1))?;
    let report = detect_outliers_with(&x_prime, &filled, cfg.outlier_scale)?;
    let outlier_mask = report.mask.intersect(&present)?;
    let outlier_fraction = outlier_mask.missing_fraction();

    if !needs_stage2(outlier_fraction, cfg.outlier_branch_threshold) {
        return Ok(NormalizedRecovery {
            x_tilde: x_prime,
            outlier_mask,
            report,
            stage_taken: StageTaken::Stage1Only,
            outlier_fraction,
            stage1_trace,
            stage2_trace: None,
        });
    }
    let (x_dprime, trace) = stage2_impute(model, &filled, &outlier_mask, &cfg.impute, sched)
        .map_err(|e| e.in_stage(Stage::Stage2))?;
    Ok(NormalizedRecovery {
        x_tilde: x_dprime,
        outlier_mask,
        report,
        stage_taken: StageTaken::Stage1PlusStage2,
        outlier_fraction,
        stage1_trace,
        stage2_trace: Some(trace),
    })
}

/// Recovers a window in measurement units, normalizing with the model's
/// training statistics.
pub fn recover(
    model: &Denoiser,
    y0: &MeasurementMatrix,
    known_mask: Option<&ObservabilityMask>,
    cfg: &TsdmConfig,
    sched: &VarianceSchedule,
) -> Result<RecoveryResult> {
    let z = model.norm.normalize(y0)?;
    let known = match known_mask {
        Some(k) => k.clone(),
        None => ObservabilityMask::filled(y0.rows(), y0.cols(), true),
    };
    let r = recover_normalized(model, &z, &known, cfg, sched)?;
    Ok(RecoveryResult {
        x_tilde: model.norm.denormalize(&r.x_tilde, y0.channels().to_vec())?,
        outlier_mask: r.outlier_mask,
        report: r.report,
        stage_taken: r.stage_taken,
        outlier_fraction: r.outlier_fraction,
        stage1_trace: r.stage1_trace,
        stage2_trace: r.stage2_trace,
    })
}

/// Recovers many windows on `workers` threads. Every window runs with the
/// configured seed, so each result equals `recover` on that window alone and
/// does not depend on its position or the worker count. Results come back in
/// input order and one failure does not stop the others.
pub fn recover_batch(
    model: &Denoiser,
    windows: &[MeasurementMatrix],
    known_masks: Option<&[ObservabilityMask]>,
    cfg: &TsdmConfig,
    sched: &VarianceSchedule,
    workers: usize,
) -> Result<Vec<Result<RecoveryResult>>> {
    if let Some(first) = windows.first() {
        if windows.iter().any(|w| w.shape() != first.shape()) {
            return Err(TsdmError::invalid("batch windows differ in shape"));
        }
    }
    if let Some(masks) = known_masks {
        if masks.len() != windows.len() {
            return Err(TsdmError::invalid("one known mask is needed per window"));
        }
    }
    let workers = workers.clamp(1, windows.len().max(1));
    let run = |k: usize| recover(model, &windows[k], known_masks.map(|m| &m[k]), cfg, sched);
    let mut slots: Vec<Option<Result<RecoveryResult>>> = (0..windows.len()).map(|_| None).collect();
    if workers == 1 {
        for (k, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run(k));
        }
    } else {
        let done: Vec<Vec<(usize, Result<RecoveryResult>)>> = thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || {
                        (w..windows.len())
                            .step_by(workers)
                            .map(|k| (k, run(k)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("recovery worker panicked"))
                .collect()
        });
        for (k, r) in done.into_iter().flatten() {
            slots[k] = Some(r);
        }
    }
    Ok(slots
        .into_iter()
        .map(|r| r.expect("every window processed"))
        .collect())
}
