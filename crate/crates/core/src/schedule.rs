//! Variance schedules and accelerated sampling subsequences.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsdmError};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.05;
pub const DEFAULT_SUBSEQUENCE_LEN: usize = 10;

/// Per-step noise variances `β_1..β_N` and their cumulative signal ratios
/// `ᾱ_n = ∏(1-β_i)`. Step indices are 1-based; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl VarianceSchedule {
    /// `N` betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(TsdmError::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(TsdmError::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    /// Builds a schedule from explicit betas, each inside `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(TsdmError::invalid("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(TsdmError::invalid("every beta must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_n` for `n` in `1..=N`.
    pub fn beta(&self, n: usize) -> f64 {
        assert!(
            (1..=self.steps()).contains(&n),
            "step {n} outside 1..={}",
            self.steps()
        );
        self.beta[n - 1]
    }

    /// `ᾱ_n` for `n` in `0..=N`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        assert!(n <= self.steps(), "step {n} outside 0..={}", self.steps());
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if (1..=self.steps()).contains(&n) {
            Ok(())
        } else {
            Err(TsdmError::invalid(format!(
                "step {n} outside 1..={}",
                self.steps()
            )))
        }
    }

    /// Standard deviation that turns the generalized reverse kernel into the
    /// ancestral (DDPM) sampler. Reference value for tests only.
    pub fn ddpm_sigma(&self, n: usize) -> Result<f64> {
        if !(2..=self.steps()).contains(&n) {
            return Err(TsdmError::invalid(format!(
                "ddpm sigma needs 2 <= n <= {}, got {n}",
                self.steps()
            )));
        }
        let (prev, cur) = (self.alpha_bar(n - 1), self.alpha_bar(n));
        Ok(((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt())
    }
}

/// How subsequence indices are spread over `1..=N`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsequenceStrategy {
    /// Stride `⌊N/s⌋`, last element forced to `N`.
    #[default]
    Uniform,
    /// Indices clustered near the low-noise end, `≈ N·(i/s)²`.
    Quadratic,
}

impl std::str::FromStr for SubsequenceStrategy {
    type Err = TsdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(TsdmError::invalid(format!(
                "unknown subsequence strategy `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for SubsequenceStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Quadratic => "quadratic",
        })
    }
}

/// Strictly increasing diffusion steps `τ_1 < … < τ_s = N` visited by the
/// accelerated reverse process. Positions are 1-based; `τ_0 = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subsequence {
    tau: Vec<usize>,
}

impl Subsequence {
    pub fn new(steps: usize, len: usize, strategy: SubsequenceStrategy) -> Result<Self> {
        if len == 0 || len > steps {
            return Err(TsdmError::invalid(format!(
                "subsequence length must be in 1..={steps}, got {len}"
            )));
        }
        let tau = match strategy {
            SubsequenceStrategy::Uniform => {
                let stride = steps / len;
                let mut tau: Vec<usize> = (1..len).map(|i| i * stride).collect();
                tau.push(steps);
                tau
            }
            SubsequenceStrategy::Quadratic => {
                let mut tau = Vec::with_capacity(len);
                let mut prev = 0;
                for i in 1..len {
                    let target = (steps as f64 * (i as f64 / len as f64).powi(2)).round() as usize;
                    let cur = target.max(prev + 1).min(steps - (len - i));
                    tau.push(cur);
                    prev = cur;
                }
                tau.push(steps);
                tau
            }
        };
        Self::from_indices(tau, steps)
    }

    pub fn uniform(steps: usize, len: usize) -> Result<Self> {
        Self::new(steps, len, SubsequenceStrategy::Uniform)
    }

    /// Validates an explicit index list against a schedule length.
    pub fn from_indices(tau: Vec<usize>, steps: usize) -> Result<Self> {
        if tau.is_empty() || tau[0] == 0 || tau.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TsdmError::invalid(
                "subsequence must be strictly increasing from 1",
            ));
        }
        if *tau.last().unwrap() != steps {
            return Err(TsdmError::invalid(format!(
                "subsequence must end at N = {steps}"
            )));
        }
        Ok(Self { tau })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// `τ_i` for `i` in `0..=s`, with `τ_0 = 0`.
    pub fn at(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.tau[i - 1]
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_ends_near_noise() {
        let s =
            VarianceSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_eq!(s.steps(), 100);
        // direct product: exp(sum ln(1 - beta)) ≈ 0.0777
        let direct: f64 = (0..100)
            .map(|i| 1.0 - (1e-4 + (0.05 - 1e-4) * i as f64 / 99.0))
            .product();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 0.1);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = VarianceSchedule::linear(1, 0.02, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.02]);
        assert_eq!(s.alpha_bars(), &[0.98]);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(VarianceSchedule::linear(10, 0.05, 0.01).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.01).is_err());
        assert!(VarianceSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(VarianceSchedule::linear(0, 0.01, 0.02).is_err());
    }

    #[test]
    fn ddpm_sigma_toy_value() {
        let s = VarianceSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let expected = ((0.1f64 / 0.28) * (1.0 - 0.72 / 0.9)).sqrt();
        assert!((s.ddpm_sigma(2).unwrap() - expected).abs() < 1e-15);
        assert!((s.ddpm_sigma(2).unwrap() - 0.2673).abs() < 1e-4);
        assert!(s.ddpm_sigma(1).is_err());
        assert!(s.ddpm_sigma(3).is_err());
    }

    #[test]
    fn ddpm_sigma_vanishes_with_beta() {
        let tiny = VarianceSchedule::from_betas(vec![1e-14, 2e-14, 3e-14]).unwrap();
        assert!(tiny.ddpm_sigma(3).unwrap() < 1e-6);
    }

    #[test]
    fn ddpm_sigma_keeps_square_root_real() {
        let s = VarianceSchedule::linear(100, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        for n in 2..=100 {
            let sigma = s.ddpm_sigma(n).unwrap();
            assert!(sigma >= 0.0);
            assert!(sigma * sigma <= 1.0 - s.alpha_bar(n - 1), "n={n}");
        }
    }

    #[test]
    fn subsequence_examples() {
        assert_eq!(
            Subsequence::uniform(100, 10).unwrap().indices(),
            &[10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
        );
        assert_eq!(
            Subsequence::uniform(7, 7).unwrap().indices(),
            &[1, 2, 3, 4, 5, 6, 7]
        );
        assert_eq!(Subsequence::uniform(100, 1).unwrap().indices(), &[100]);
        assert_eq!(Subsequence::uniform(10, 3).unwrap().indices(), &[3, 6, 10]);
        assert!(Subsequence::uniform(10, 11).is_err());
        assert!(Subsequence::uniform(10, 0).is_err());
        let q = Subsequence::new(100, 10, SubsequenceStrategy::Quadratic).unwrap();
        assert_eq!(q.indices(), &[1, 4, 9, 16, 25, 36, 49, 64, 81, 100]);
    }

    proptest! {
        #[test]
        fn schedule_invariants(
            steps in 1usize..300,
            start in 1e-5f64..0.01,
            width in 1e-4f64..0.5,
        ) {
            let end = (start + width).min(0.999);
            let s = VarianceSchedule::linear(steps, start, end).unwrap();
            for n in 1..=steps {
                let a = s.alpha_bar(n);
                prop_assert!(a > 0.0 && a < 1.0);
                prop_assert!(a < s.alpha_bar(n - 1));
                prop_assert_eq!(a, s.alpha_bar(n - 1) * (1.0 - s.beta(n)));
                if n > 1 {
                    prop_assert!(s.beta(n) > s.beta(n - 1));
                }
            }
        }

        /// Plugging the ancestral sigma into the generalized reverse mean
        /// reproduces the DDPM posterior coefficient on x₀.
        #[test]
        fn ddpm_sigma_recovers_posterior_mean(
            steps in 2usize..200,
            start in 1e-5f64..0.01,
            width in 1e-3f64..0.3,
        ) {
            let s = VarianceSchedule::linear(steps, start, start + width).unwrap();
            for n in 2..=steps {
                let sigma = s.ddpm_sigma(n).unwrap();
                let (prev, cur) = (s.alpha_bar(n - 1), s.alpha_bar(n));
                let generalized = prev.sqrt()
                    - (1.0 - prev - sigma * sigma).sqrt() * cur.sqrt() / (1.0 - cur).sqrt();
                let posterior = prev.sqrt() * s.beta(n) / (1.0 - cur);
                prop_assert!((generalized - posterior).abs() < 1e-12, "n={} {} {}", n, generalized, posterior);
            }
        }

        #[test]
        fn subsequences_are_valid(steps in 1usize..500, frac in 0.0f64..1.0, quad in any::<bool>()) {
            let len = 1 + ((steps - 1) as f64 * frac) as usize;
            let strategy = if quad { SubsequenceStrategy::Quadratic } else { SubsequenceStrategy::Uniform };
            let tau = Subsequence::new(steps, len, strategy).unwrap();
            prop_assert_eq!(tau.len(), len);
            prop_assert_eq!(tau.at(len), steps);
            prop_assert!(tau.at(1) >= 1);
            prop_assert!(tau.indices().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
