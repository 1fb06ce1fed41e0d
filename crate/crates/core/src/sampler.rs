//! Forward diffusion, x₀ estimation, the optimal-variance estimator and the
//! accelerated reverse update over a subsequence.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use tsdm_tensor::Tensor;

use crate::denoiser::NoisePredictor;
use crate::error::{Result, TsdmError};
use crate::schedule::{Subsequence, VarianceSchedule};

/// Row-major `N(0, I)` draw.
pub fn standard_normal(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn check_step(sched: &VarianceSchedule, n: usize, min: usize) -> Result<()> {
    if n < min || n > sched.steps() {
        return Err(TsdmError::invalid(format!(
            "step {n} outside {min}..={}",
            sched.steps()
        )));
    }
    Ok(())
}

/// `x_n = √ᾱ_n·x₀ + √(1−ᾱ_n)·ε`; `n = 0` returns `x₀`.
pub fn forward_diffuse(
    x0: &Tensor,
    n: usize,
    eps: &Tensor,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    check_step(sched, n, 0)?;
    let ab = sched.alpha_bar(n);
    Ok(x0.scale(ab.sqrt())?.add(&eps.scale((1.0 - ab).sqrt())?)?)
}

/// `μ̄ = (x_n − √(1−ᾱ_n)·ε_pred) / √ᾱ_n`.
pub fn estimate_x0(
    x_n: &Tensor,
    eps_pred: &Tensor,
    n: usize,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    check_step(sched, n, 0)?;
    x0_from_alpha_bar(x_n, eps_pred, sched.alpha_bar(n))
}

pub(crate) fn x0_from_alpha_bar(x_n: &Tensor, eps_pred: &Tensor, ab: f64) -> Result<Tensor> {
    Ok(x_n
        .sub(&eps_pred.scale((1.0 - ab).sqrt())?)?
        .scale(1.0 / ab.sqrt())?)
}

/// `σ̄_n² = ((1−ᾱ_n)/ᾱ_n)·(1 − E‖ε_θ‖²/d)`, with the expectation taken as
/// the mean over `eps_preds` and the result clamped at zero.
pub fn optimal_variance(eps_preds: &[Tensor], n: usize, sched: &VarianceSchedule) -> Result<f64> {
    check_step(sched, n, 1)?;
    optimal_variance_from_alpha_bar(eps_preds, sched.alpha_bar(n))
}

pub(crate) fn optimal_variance_from_alpha_bar(eps_preds: &[Tensor], ab: f64) -> Result<f64> {
    let first = eps_preds
        .first()
        .ok_or_else(|| TsdmError::invalid("optimal variance needs at least one prediction"))?;
    let d = first.numel();
    let mut sq = 0.0;
    for e in eps_preds {
        if e.numel() != d {
            return Err(TsdmError::invalid("predictions in a batch differ in size"));
        }
        sq += e.data().iter().map(|v| v * v).sum::<f64>();
    }
    let mean_sq = sq / eps_preds.len() as f64;
    Ok(((1.0 - ab) / ab * (1.0 - mean_sq / d as f64)).max(0.0))
}

/// `Γ = √ᾱ_prev − √(1−ᾱ_prev)·√ᾱ_cur/√(1−ᾱ_cur)`.
pub fn gamma_from_alpha_bars(a_prev: f64, a_cur: f64) -> f64 {
    a_prev.sqrt() - (1.0 - a_prev).sqrt() * a_cur.sqrt() / (1.0 - a_cur).sqrt()
}

/// `Γ_{τ_i}` for subsequence position `i ≥ 2`.
pub fn capital_gamma(i: usize, sched: &VarianceSchedule, tau: &Subsequence) -> Result<f64> {
    check_position(i, tau, 2)?;
    Ok(gamma_from_alpha_bars(
        sched.alpha_bar(tau.at(i - 1)),
        sched.alpha_bar(tau.at(i)),
    ))
}

fn check_position(i: usize, tau: &Subsequence, min: usize) -> Result<()> {
    if i < min || i > tau.len() {
        return Err(TsdmError::invalid(format!(
            "subsequence position {i} outside {min}..={}",
            tau.len()
        )));
    }
    Ok(())
}

/// Scalars of one reverse step from `τ_i` to `τ_{i−1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub a_prev: f64,
    pub a_cur: f64,
    pub gamma: f64,
    pub sigma_bar: f64,
}

impl StepCoefficients {
    pub fn new(a_prev: f64, a_cur: f64, sigma_bar: f64) -> Result<Self> {
        let valid = a_cur > 0.0 && a_prev > a_cur && a_prev <= 1.0 && sigma_bar >= 0.0;
        if !valid || !sigma_bar.is_finite() {
            return Err(TsdmError::invalid(format!(
                "step coefficients need 0 < ᾱ_cur < ᾱ_prev ≤ 1 and σ̄ ≥ 0, got {a_cur}, {a_prev}, {sigma_bar}"
            )));
        }
        Ok(Self {
            a_prev,
            a_cur,
            gamma: gamma_from_alpha_bars(a_prev, a_cur),
            sigma_bar,
        })
    }

    /// Coefficients at position `i ∈ 1..=s`; `τ₀` is the `ᾱ = 1` anchor.
    pub fn at(
        sched: &VarianceSchedule,
        tau: &Subsequence,
        i: usize,
        sigma_bar: f64,
    ) -> Result<Self> {
        check_position(i, tau, 1)?;
        Self::new(
            sched.alpha_bar(tau.at(i - 1)),
            sched.alpha_bar(tau.at(i)),
            sigma_bar,
        )
    }

    /// Coefficient on `x` once `μ̄` is expanded: `√ᾱ_prev/√ᾱ_cur`.
    pub fn x_coefficient(&self) -> f64 {
        self.a_prev.sqrt() / self.a_cur.sqrt()
    }

    /// Coefficient on `ε_pred` once `μ̄` is expanded.
    pub fn eps_coefficient(&self) -> f64 {
        (1.0 - self.a_prev).sqrt()
            - self.a_prev.sqrt() * (1.0 - self.a_cur).sqrt() / self.a_cur.sqrt()
    }
}

/// `x_prev = √(1−ᾱ_prev)/√(1−ᾱ_cur)·x + Γ·μ̄(x) + Γ·σ̄·ε_draw`.
pub fn improved_update(
    c: &StepCoefficients,
    x: &Tensor,
    eps_pred: &Tensor,
    eps_draw: &Tensor,
) -> Result<Tensor> {
    let mu = x0_from_alpha_bar(x, eps_pred, c.a_cur)?;
    let lead = (1.0 - c.a_prev).sqrt() / (1.0 - c.a_cur).sqrt();
    Ok(x.scale(lead)?
        .add(&mu.scale(c.gamma)?)?
        .add(&eps_draw.scale(c.gamma * c.sigma_bar)?)?)
}

/// The same update written directly in `(x, ε_pred, ε_draw)`.
pub fn detailed_update(
    c: &StepCoefficients,
    x: &Tensor,
    eps_pred: &Tensor,
    eps_draw: &Tensor,
) -> Result<Tensor> {
    Ok(x.scale(c.x_coefficient())?
        .add(&eps_draw.scale(c.gamma * c.sigma_bar)?)?
        .add(&eps_pred.scale(c.eps_coefficient())?)?)
}

fn step_coefficients(
    eps_pred: &Tensor,
    i: usize,
    sched: &VarianceSchedule,
    tau: &Subsequence,
) -> Result<StepCoefficients> {
    check_position(i, tau, 2)?;
    let a_cur = sched.alpha_bar(tau.at(i));
    let sigma2 = optimal_variance_from_alpha_bar(std::slice::from_ref(eps_pred), a_cur)?;
    StepCoefficients::at(sched, tau, i, sigma2.sqrt())
}

/// One accelerated reverse step from `τ_i` to `τ_{i−1}` (`i ≥ 2`), with σ̄
/// estimated from `eps_pred`. `eps_draw = 0` makes it deterministic.
pub fn improved_step(
    x_cur: &Tensor,
    eps_pred: &Tensor,
    i: usize,
    sched: &VarianceSchedule,
    tau: &Subsequence,
    eps_draw: &Tensor,
) -> Result<Tensor> {
    let c = step_coefficients(eps_pred, i, sched, tau)?;
    improved_update(&c, x_cur, eps_pred, eps_draw)
}

/// [`improved_step`] in its expanded form.
pub fn detailed_step(
    x_cur: &Tensor,
    eps_pred: &Tensor,
    i: usize,
    sched: &VarianceSchedule,
    tau: &Subsequence,
    eps_draw: &Tensor,
) -> Result<Tensor> {
    let c = step_coefficients(eps_pred, i, sched, tau)?;
    detailed_update(&c, x_cur, eps_pred, eps_draw)
}

/// One reverse step's diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Diffusion step `τ_i` the update started from.
    pub step: usize,
    /// RMS of the x₀ estimate at this step.
    pub mean_rms: f64,
    pub sigma_bar: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerTrace {
    pub records: Vec<StepRecord>,
}

impl SamplerTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,sigma_bar,elapsed_ms\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.sigma_bar, r.elapsed_ms);
        }
        out
    }

    pub fn total_ms(&self) -> f64 {
        self.records.iter().map(|r| r.elapsed_ms).sum()
    }

    pub(crate) fn push(&mut self, step: usize, mu: &Tensor, sigma_bar: f64, started: Instant) {
        self.records.push(StepRecord {
            step,
            mean_rms: rms(mu),
            sigma_bar,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
}

pub(crate) fn rms(t: &Tensor) -> f64 {
    (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt()
}

pub(crate) fn ensure_finite(t: Tensor, step: usize) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TsdmError::NonFinite { step })
    }
}

/// Maps non-finite tensor failures inside a reverse step to the step index.
pub(crate) fn at_step<T>(r: Result<T>, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        TsdmError::Tensor(tsdm_tensor::TensorError::NonFinite { .. }) => {
            TsdmError::NonFinite { step }
        }
        other => other,
    })
}

/// Draws `x_{τ_s} ~ N(0, I)`, applies the accelerated update down the
/// subsequence and returns the x₀ estimate at `τ₁`. Random draws are
/// consumed in order: the initial latent, then one `ε` per step `i = s..2`.
pub fn unconditional_sample(
    model: &impl NoisePredictor,
    shape: (usize, usize),
    sched: &VarianceSchedule,
    tau: &Subsequence,
    rng: &mut impl Rng,
) -> Result<(Tensor, SamplerTrace)> {
    let mut x = standard_normal([shape.0, shape.1], rng);
    let mut trace = SamplerTrace::default();
    for i in (2..=tau.len()).rev() {
        let started = Instant::now();
        let n = tau.at(i);
        let eps = model.predict_noise(&x, n)?;
        let c = at_step(step_coefficients(&eps, i, sched, tau), n)?;
        let draw = standard_normal([shape.0, shape.1], rng);
        let mu = at_step(x0_from_alpha_bar(&x, &eps, c.a_cur), n)?;
        x = ensure_finite(at_step(improved_update(&c, &x, &eps, &draw), n)?, n)?;
        trace.push(n, &mu, c.sigma_bar, started);
    }
    let started = Instant::now();
    let n = tau.at(1);
    let eps = model.predict_noise(&x, n)?;
    let x0 = ensure_finite(at_step(estimate_x0(&x, &eps, n, sched), n)?, n)?;
    trace.push(n, &x0, 0.0, started);
    Ok((x0, trace))
}
