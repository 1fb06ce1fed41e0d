//! Stage 2: masked imputation. Trusted entries are re-noised from the
//! measurements at every step, untrusted ones are generated, and each step
//! is repeated `R` times with single-step re-noising in between.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdm_tensor::Tensor;

use crate::denoiser::NoisePredictor;
use crate::error::{Result, TsdmError};
use crate::matrix::ObservabilityMask;
use crate::sampler::{
    at_step, detailed_update, ensure_finite, optimal_variance_from_alpha_bar, standard_normal,
    x0_from_alpha_bar, SamplerTrace, StepCoefficients,
};
use crate::schedule::{Subsequence, VarianceSchedule};

pub const DEFAULT_RESAMPLE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeConfig {
    /// Passes per reverse step, `R ≥ 1`.
    pub resample: usize,
    pub tau: Subsequence,
    pub seed: u64,
    /// Return trusted entries as `y₀` instead of `√ᾱ_{τ₁}·y₀`.
    pub rescale_observed: bool,
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resample == 0 {
            return Err(TsdmError::invalid("resampling count must be at least 1"));
        }
        Ok(())
    }
}

fn check_mask(mask: &ObservabilityMask, t: &Tensor) -> Result<()> {
    if t.shape() != [mask.rows(), mask.cols()] {
        return Err(TsdmError::invalid(format!(
            "mask {:?} does not match tensor {:?}",
            mask.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// `√ᾱ·y₀ + √(1−ᾱ)·ε₁` on trusted entries; untrusted entries are never
/// read and come out as zero.
pub fn diffuse_known_at(
    y0: &Tensor,
    mask: &ObservabilityMask,
    alpha_bar: f64,
    eps1: &Tensor,
) -> Result<Tensor> {
    check_mask(mask, y0)?;
    check_mask(mask, eps1)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = mask
        .bits()
        .iter()
        .enumerate()
        .map(|(k, &keep)| {
            if keep {
                a * y0.data()[k] + b * eps1.data()[k]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::new(y0.shape().to_vec(), data)?)
}

/// Known part at `τ_{i−1}` over every entry: `√ᾱ_{τ_{i−1}}·y₀ + √(1−ᾱ_{τ_{i−1}})·ε₁`.
pub fn diffuse_known(
    y0: &Tensor,
    i: usize,
    sched: &VarianceSchedule,
    tau: &Subsequence,
    eps1: &Tensor,
) -> Result<Tensor> {
    if i == 0 || i > tau.len() {
        return Err(TsdmError::invalid(format!(
            "subsequence position {i} outside 1..={}",
            tau.len()
        )));
    }
    let (m, t) = y0.dims2("diffuse_known")?;
    diffuse_known_at(
        y0,
        &ObservabilityMask::filled(m, t, true),
        sched.alpha_bar(tau.at(i - 1)),
        eps1,
    )
}

/// `Ω⊙known + (1−Ω)⊙generated`, as a select so the unused side is never read.
pub fn combine_masked(
    known: &Tensor,
    generated: &Tensor,
    mask: &ObservabilityMask,
) -> Result<Tensor> {
    check_mask(mask, known)?;
    check_mask(mask, generated)?;
    let data = mask
        .bits()
        .iter()
        .enumerate()
        .map(|(k, &keep)| {
            if keep {
                known.data()[k]
            } else {
                generated.data()[k]
            }
        })
        .collect();
    Ok(Tensor::new(known.shape().to_vec(), data)?)
}

/// `√(1−β)·x + √β·ε₂`.
pub fn renoise(x_prev: &Tensor, beta: f64, eps2: &Tensor) -> Result<Tensor> {
    Ok(x_prev
        .scale((1.0 - beta).sqrt())?
        .add(&eps2.scale(beta.sqrt())?)?)
}

/// Re-noises `x_{τ_{i−1}}` back to `τ_i` with the single-step `β_{τ_i}`.
pub fn resample_step(
    x_prev: &Tensor,
    i: usize,
    sched: &VarianceSchedule,
    tau: &Subsequence,
    eps2: &Tensor,
) -> Result<Tensor> {
    if i == 0 || i > tau.len() {
        return Err(TsdmError::invalid(format!(
            "subsequence position {i} outside 1..={}",
            tau.len()
        )));
    }
    renoise(x_prev, sched.beta(tau.at(i)), eps2)
}

/// Imputes untrusted entries of normalized `y0`, seeded from `cfg.seed`.
pub fn stage2_impute(
    model: &impl NoisePredictor,
    y0: &Tensor,
    mask: &ObservabilityMask,
    cfg: &ImputeConfig,
    sched: &VarianceSchedule,
) -> Result<(Tensor, SamplerTrace)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    stage2_impute_with_rng(model, y0, mask, cfg, sched, &mut rng)
}

/// Stage 2 with an explicit generator. Draw order: the initial latent, then
/// per `(i, r)` the known-part noise `ε₁`, the update noise, and the
/// re-noising `ε₂` when `r < R`.
pub fn stage2_impute_with_rng(
    model: &impl NoisePredictor,
    y0: &Tensor,
    mask: &ObservabilityMask,
    cfg: &ImputeConfig,
    sched: &VarianceSchedule,
    rng: &mut impl Rng,
) -> Result<(Tensor, SamplerTrace)> {
    cfg.validate()?;
    check_mask(mask, y0)?;
    let tau = &cfg.tau;
    let shape = [mask.rows(), mask.cols()];
    // Untrusted entries may hold anything, including NaN; only trusted ones are kept.
    let y0 = combine_masked(y0, &Tensor::zeros(shape.to_vec()), mask)?;
    if !y0.is_finite() {
        return Err(TsdmError::invalid("trusted measurements must be finite"));
    }

    let mut x = standard_normal(shape, rng);
    let mut trace = SamplerTrace::default();
    for i in (2..=tau.len()).rev() {
        let started = Instant::now();
        let n = tau.at(i);
        let a_prev = sched.alpha_bar(tau.at(i - 1));
        let mut sigma_bar = 0.0;
        let mut mu = None;
        let mut x_prev = None;
        for r in 1..=cfg.resample {
            let eps1 = standard_normal(shape, rng);
            let known = at_step(diffuse_known_at(&y0, mask, a_prev, &eps1), n)?;
            let eps = model.predict_noise(&x, n)?;
            let sigma2 =
                optimal_variance_from_alpha_bar(std::slice::from_ref(&eps), sched.alpha_bar(n))?;
            let c = StepCoefficients::at(sched, tau, i, sigma2.sqrt())?;
            let draw = standard_normal(shape, rng);
            let generated = at_step(detailed_update(&c, &x, &eps, &draw), n)?;
            mu = Some(at_step(x0_from_alpha_bar(&x, &eps, c.a_cur), n)?);
            let combined = ensure_finite(combine_masked(&known, &generated, mask)?, n)?;
            if r < cfg.resample {
                let eps2 = standard_normal(shape, rng);
                x = ensure_finite(at_step(renoise(&combined, sched.beta(n), &eps2), n)?, n)?;
            }
            sigma_bar = c.sigma_bar;
            x_prev = Some(combined);
        }
        x = x_prev.expect("at least one pass");
        trace.push(
            n,
            mu.as_ref().expect("at least one pass"),
            sigma_bar,
            started,
        );
    }

    let started = Instant::now();
    let n = tau.at(1);
    let ab = sched.alpha_bar(n);
    let eps = model.predict_noise(&x, n)?;
    let mu = at_step(x0_from_alpha_bar(&x, &eps, ab), n)?;
    let observed = if cfg.rescale_observed {
        y0.clone()
    } else {
        y0.scale(ab.sqrt())?
    };
    let out = ensure_finite(combine_masked(&observed, &mu, mask)?, n)?;
    trace.push(n, &mu, 0.0, started);
    Ok((out, trace))
}
