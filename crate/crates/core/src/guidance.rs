//! Stage 1: guided conditional generation pulled toward the measurements,
//! followed by the 3σ residual test that localizes outliers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsdm_tensor::Tensor;

use crate::denoiser::NoisePredictor;
use crate::error::{Result, TsdmError};
use crate::matrix::{std_dev, ObservabilityMask};
use crate::sampler::{
    at_step, ensure_finite, improved_update, optimal_variance_from_alpha_bar, standard_normal,
    x0_from_alpha_bar, SamplerTrace, StepCoefficients,
};
use crate::schedule::{Subsequence, VarianceSchedule};

pub const DEFAULT_OMEGA: f64 = 1.0;
/// Outlier share at or above which Stage 2 runs.
pub const DEFAULT_BRANCH_THRESHOLD: f64 = 0.1;
/// Residual multiple that marks an outlier.
pub const SIGMA_MULTIPLE: f64 = 3.0;
/// Lower bound on the per-channel scale in the outlier test.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub tau: Subsequence,
    pub seed: u64,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(TsdmError::invalid(format!(
                "guidance scale must be finite and nonnegative, got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

fn position_alpha_bar(i: usize, sched: &VarianceSchedule, tau: &Subsequence) -> Result<f64> {
    if i == 0 || i > tau.len() {
        return Err(TsdmError::invalid(format!(
            "subsequence position {i} outside 1..={}",
            tau.len()
        )));
    }
    Ok(sched.alpha_bar(tau.at(i)))
}

/// `y_τ = √ᾱ·y₀ + √(1−ᾱ)·ε_pred` at a given cumulative signal ratio.
pub fn condition_noisy_at(y0: &Tensor, eps_pred: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    Ok(y0
        .scale(alpha_bar.sqrt())?
        .add(&eps_pred.scale((1.0 - alpha_bar).sqrt())?)?)
}

/// Noisy copy of the measurements at `τ_i`, built with the model's own noise.
pub fn condition_noisy(
    y0: &Tensor,
    eps_pred: &Tensor,
    i: usize,
    sched: &VarianceSchedule,
    tau: &Subsequence,
) -> Result<Tensor> {
    condition_noisy_at(y0, eps_pred, position_alpha_bar(i, sched, tau)?)
}

/// `ε̂ = ε_pred − ω·√(1−ᾱ)·(y_τ − x_τ)` at a given cumulative signal ratio.
pub fn guidance_correction(
    eps_pred: &Tensor,
    y_noisy: &Tensor,
    x_cur: &Tensor,
    omega: f64,
    alpha_bar: f64,
) -> Result<Tensor> {
    let pull = y_noisy
        .sub(x_cur)?
        .scale(omega * (1.0 - alpha_bar).sqrt())?;
    Ok(eps_pred.sub(&pull)?)
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn corrected_noise(
    eps_pred: &Tensor,
    y_noisy: &Tensor,
    x_cur: &Tensor,
    i: usize,
    omega: f64,
    sched: &VarianceSchedule,
    tau: &Subsequence,
) -> Result<Tensor> {
    if !(omega >= 0.0) {
        return Err(TsdmError::invalid("guidance scale must be nonnegative"));
    }
    guidance_correction(
        eps_pred,
        y_noisy,
        x_cur,
        omega,
        position_alpha_bar(i, sched, tau)?,
    )
}

/// Guided recovery of normalized measurements `y0`, seeded from `cfg.seed`.
pub fn stage1_recover(
    model: &impl NoisePredictor,
    y0: &Tensor,
    cfg: &GuidanceConfig,
    sched: &VarianceSchedule,
) -> Result<(Tensor, SamplerTrace)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    stage1_recover_with_rng(model, y0, cfg.omega, &cfg.tau, sched, &mut rng)
}

/// Stage 1 with an explicit generator. Draws follow the unconditional
/// sampler exactly (initial latent, then one `ε` per step), so `ω = 0`
/// reproduces it bit for bit.
pub fn stage1_recover_with_rng(
    model: &impl NoisePredictor,
    y0: &Tensor,
    omega: f64,
    tau: &Subsequence,
    sched: &VarianceSchedule,
    rng: &mut impl Rng,
) -> Result<(Tensor, SamplerTrace)> {
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(TsdmError::invalid(
            "guidance scale must be finite and nonnegative",
        ));
    }
    if !y0.is_finite() {
        return Err(TsdmError::invalid("stage 1 input must be finite"));
    }
    let shape = y0.dims2("stage 1")?;
    let mut x = standard_normal([shape.0, shape.1], rng);
    let mut trace = SamplerTrace::default();

    let rectified = |x: &Tensor, n: usize| -> Result<Tensor> {
        let ab = sched.alpha_bar(n);
        let eps = model.predict_noise(x, n)?;
        let y_noisy = at_step(condition_noisy_at(y0, &eps, ab), n)?;
        at_step(guidance_correction(&eps, &y_noisy, x, omega, ab), n)
    };

    for i in (2..=tau.len()).rev() {
        let started = Instant::now();
        let n = tau.at(i);
        let eps_hat = rectified(&x, n)?;
        let a_cur = sched.alpha_bar(n);
        let sigma2 = optimal_variance_from_alpha_bar(std::slice::from_ref(&eps_hat), a_cur)?;
        let c = StepCoefficients::at(sched, tau, i, sigma2.sqrt())?;
        let draw = standard_normal([shape.0, shape.1], rng);
        let mu = at_step(x0_from_alpha_bar(&x, &eps_hat, a_cur), n)?;
        x = ensure_finite(at_step(improved_update(&c, &x, &eps_hat, &draw), n)?, n)?;
        trace.push(n, &mu, c.sigma_bar, started);
    }
    let started = Instant::now();
    let n = tau.at(1);
    let eps_hat = rectified(&x, n)?;
    let x0 = ensure_finite(
        at_step(x0_from_alpha_bar(&x, &eps_hat, sched.alpha_bar(n)), n)?,
        n,
    )?;
    trace.push(n, &x0, 0.0, started);
    Ok((x0, trace))
}

/// Per-channel scale `σ` in the test `|x'₀ − y₀| > 3σ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierScale {
    /// Standard deviation of the measurement row itself.
    InputStd,
    /// Median absolute deviation of the residual row, scaled to a
    /// Gaussian standard deviation (×1.4826).
    #[default]
    ResidualMad,
}

impl fmt::Display for OutlierScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutlierScale::InputStd => "input_std",
            OutlierScale::ResidualMad => "residual_mad",
        })
    }
}

impl FromStr for OutlierScale {
    type Err = TsdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input_std" => Ok(OutlierScale::InputStd),
            "residual_mad" => Ok(OutlierScale::ResidualMad),
            other => Err(TsdmError::invalid(format!(
                "unknown outlier scale {other:?} (expected input_std or residual_mad)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierReport {
    /// `true` where the entry passed the test.
    pub mask: ObservabilityMask,
    /// Standard deviation of `x'₀ − y₀` per channel.
    pub residual_std: Vec<f64>,
    /// Scale `σ` the threshold was built from, per channel.
    pub scale: Vec<f64>,
    /// Share of flagged entries.
    pub fraction: f64,
}

/// Gaussian consistency factor for the median absolute deviation.
const MAD_TO_STD: f64 = 1.4826;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// 3σ test with the default scale.
pub fn detect_outliers(x0_prime: &Tensor, y0: &Tensor) -> Result<OutlierReport> {
    detect_outliers_with(x0_prime, y0, OutlierScale::default())
}

/// Flags `(m, t)` when `|x'₀ − y₀|(m, t) > 3·σ_m`, with `σ_m` chosen by `scale`
/// and floored at [`SCALE_FLOOR`].
pub fn detect_outliers_with(
    x0_prime: &Tensor,
    y0: &Tensor,
    scale: OutlierScale,
) -> Result<OutlierReport> {
    let (m, t) = y0.dims2("detect_outliers")?;
    if x0_prime.shape() != y0.shape() {
        return Err(TsdmError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            x0_prime.shape(),
            y0.shape()
        )));
    }
    let mut bits = Vec::with_capacity(m * t);
    let mut residual_std = Vec::with_capacity(m);
    let mut scales = Vec::with_capacity(m);
    for ch in 0..m {
        let y = &y0.data()[ch * t..(ch + 1) * t];
        let x = &x0_prime.data()[ch * t..(ch + 1) * t];
        let signed: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let sigma = match scale {
            OutlierScale::InputStd => std_dev(y),
            OutlierScale::ResidualMad => {
                let med = median(signed.clone());
                MAD_TO_STD * median(signed.iter().map(|r| (r - med).abs()).collect())
            }
        };
        let sigma = sigma.max(SCALE_FLOOR);
        bits.extend(signed.iter().map(|r| r.abs() <= SIGMA_MULTIPLE * sigma));
        residual_std.push(std_dev(&signed));
        scales.push(sigma);
    }
    let mask = ObservabilityMask::new(m, t, bits)?;
    let fraction = mask.missing_fraction();
    Ok(OutlierReport {
        mask,
        residual_std,
        scale: scales,
        fraction,
    })
}

/// Stage 2 runs unless the outlier share is strictly below `threshold`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn needs_stage2(fraction: f64, threshold: f64) -> bool {
    !(fraction < threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correction_toy_value() {
        let eps = Tensor::scalar(0.0);
        let y = Tensor::scalar(0.4);
        let x = Tensor::scalar(0.0);
        let out = guidance_correction(&eps, &y, &x, 1.0, 0.5).unwrap();
        assert!((out.data()[0] + 0.5f64.sqrt() * 0.4).abs() < 1e-15);
        assert!((out.data()[0] + 0.2828).abs() < 5e-5);
    }

    #[test]
    fn correction_vanishes_on_trajectory_or_without_guidance() {
        let eps = Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::new([3], vec![-1.0, 0.5, 9.0]).unwrap();
        assert_eq!(guidance_correction(&eps, &y, &x, 0.0, 0.3).unwrap(), eps);
        assert_eq!(guidance_correction(&eps, &y, &y, 7.0, 0.3).unwrap(), eps);
    }

    #[test]
    fn conditioning_anchors() {
        let y = Tensor::new([2], vec![1.5, -2.0]).unwrap();
        let eps = Tensor::new([2], vec![0.3, 0.7]).unwrap();
        assert_eq!(condition_noisy_at(&y, &eps, 1.0).unwrap(), y);
        let zero = Tensor::zeros([2]);
        assert_eq!(
            condition_noisy_at(&y, &zero, 0.64).unwrap(),
            y.scale(0.8).unwrap()
        );
    }

    #[test]
    fn branch_rule_is_strict() {
        assert!(!needs_stage2(0.099, 0.1));
        assert!(needs_stage2(0.1, 0.1));
        assert!(needs_stage2(0.5, 0.1));
    }

    #[test]
    fn scale_names_round_trip() {
        for s in [OutlierScale::InputStd, OutlierScale::ResidualMad] {
            assert_eq!(s.to_string().parse::<OutlierScale>().unwrap(), s);
        }
        assert!("sigma".parse::<OutlierScale>().is_err());
    }
}
