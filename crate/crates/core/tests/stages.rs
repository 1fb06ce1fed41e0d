use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdm_core::denoiser::NoisePredictor;
use tsdm_core::guidance::{
    condition_noisy, condition_noisy_at, corrected_noise, detect_outliers, detect_outliers_with,
    needs_stage2, stage1_recover, stage1_recover_with_rng, GuidanceConfig, OutlierScale,
};
use tsdm_core::impute::{
    combine_masked, diffuse_known, resample_step, stage2_impute, ImputeConfig, DEFAULT_RESAMPLE,
};
use tsdm_core::matrix::ObservabilityMask;
use tsdm_core::sampler::{forward_diffuse, standard_normal, unconditional_sample};
use tsdm_core::schedule::{Subsequence, VarianceSchedule};
use tsdm_tensor::Tensor;

/// Exact noise predictor for unit-Gaussian data.
struct GaussianOracle<'a>(&'a VarianceSchedule);

impl NoisePredictor for GaussianOracle<'_> {
    fn predict_noise(&self, x: &Tensor, n: usize) -> tsdm_core::Result<Tensor> {
        Ok(x.scale((1.0 - self.0.alpha_bar(n)).sqrt())?)
    }
}

fn sched() -> VarianceSchedule {
    VarianceSchedule::linear(100, 1e-4, 0.05).unwrap()
}

fn tau() -> Subsequence {
    Subsequence::uniform(100, 10).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Smooth multichannel test signal with unit-order amplitude.
fn smooth_window(m: usize, t: usize, phase: f64) -> Tensor {
    Tensor::from_fn([m, t], |k| {
        let (ch, s) = ((k / t) as f64, (k % t) as f64);
        (s * 0.2 + ch + phase).sin() + 0.3 * (s * 0.05 * (ch + 1.0)).cos()
    })
}

fn guidance(omega: f64, seed: u64) -> GuidanceConfig {
    GuidanceConfig {
        omega,
        tau: tau(),
        seed,
    }
}

fn impute_cfg(resample: usize, seed: u64) -> ImputeConfig {
    ImputeConfig {
        resample,
        tau: tau(),
        seed,
        rescale_observed: false,
    }
}

#[test]
fn condition_noisy_examples() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y0 = standard_normal([2, 5], &mut rng);
    let eps = standard_normal([2, 5], &mut rng);
    assert_eq!(condition_noisy_at(&y0, &eps, 1.0).unwrap(), y0);
    let i = 4;
    let ab = s.alpha_bar(tau().at(i));
    let zero = Tensor::zeros([2, 5]);
    assert_eq!(
        condition_noisy(&y0, &zero, i, &s, &tau()).unwrap(),
        y0.scale(ab.sqrt()).unwrap()
    );
    // On the forward trajectory the guidance term vanishes.
    let x = forward_diffuse(&y0, tau().at(i), &eps, &s).unwrap();
    let y = condition_noisy(&y0, &eps, i, &s, &tau()).unwrap();
    assert!(max_abs_diff(&x, &y) < 1e-15);
    let corrected = corrected_noise(&eps, &y, &x, i, 3.0, &s, &tau()).unwrap();
    assert!(max_abs_diff(&corrected, &eps) < 1e-14);
}

#[test]
fn corrected_noise_examples() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = standard_normal([2, 5], &mut rng);
    let y = standard_normal([2, 5], &mut rng);
    let x = standard_normal([2, 5], &mut rng);
    assert_eq!(
        corrected_noise(&eps, &y, &x, 3, 0.0, &s, &tau()).unwrap(),
        eps
    );
    assert_eq!(
        corrected_noise(&eps, &x, &x, 3, 7.0, &s, &tau()).unwrap(),
        eps
    );
    let diff = Tensor::new([1, 1], vec![0.4]).unwrap();
    let zero = Tensor::zeros([1, 1]);
    let e = Tensor::new([1, 1], vec![0.1]).unwrap();
    let out = tsdm_core::guidance::guidance_correction(&e, &diff, &zero, 1.0, 0.5).unwrap();
    assert!((out.data()[0] - (0.1 - 0.2828)).abs() < 1e-4);
    assert!(corrected_noise(&eps, &y, &x, 3, -1.0, &s, &tau()).is_err());
}

#[test]
fn zero_guidance_is_the_unconditional_sampler() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let y0 = smooth_window(3, 16, 0.0);
    for seed in [0, 1, 99] {
        let (a, ta) = stage1_recover(&oracle, &y0, &guidance(0.0, seed), &s).unwrap();
        let (b, tb) = unconditional_sample(
            &oracle,
            (3, 16),
            &s,
            &tau(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert_eq!(a, b);
        for (ra, rb) in ta.records.iter().zip(&tb.records) {
            assert_eq!(
                (ra.step, ra.mean_rms.to_bits(), ra.sigma_bar.to_bits()),
                (rb.step, rb.mean_rms.to_bits(), rb.sigma_bar.to_bits())
            );
        }
    }
}

#[test]
fn zero_guidance_ignores_the_measurements() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let y0 = standard_normal([4, 64], &mut ChaCha8Rng::seed_from_u64(17));
    let (x, _) = stage1_recover(&oracle, &y0, &guidance(0.0, 3), &s).unwrap();
    let r = correlation(x.data(), y0.data());
    assert!(r.abs() < 0.3, "{r}");
}

#[test]
fn strong_guidance_reproduces_the_measurements() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let y0 = smooth_window(4, 64, 0.3);
    let (x, _) = stage1_recover(&oracle, &y0, &guidance(20.0, 5), &s).unwrap();
    for ch in 0..4 {
        let r = correlation(
            &x.data()[ch * 64..(ch + 1) * 64],
            &y0.data()[ch * 64..(ch + 1) * 64],
        );
        assert!(r > 0.99, "channel {ch}: {r}");
    }
}

#[test]
fn guidance_pull_is_monotone_on_the_fixture() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let y0 = smooth_window(4, 64, 1.1);
    let mut last = f64::INFINITY;
    for omega in [0.0, 0.5, 1.0, 2.0, 5.0] {
        let (x, _) = stage1_recover(&oracle, &y0, &guidance(omega, 8), &s).unwrap();
        let dist = x
            .sub(&y0)
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(dist <= last, "omega {omega}: {dist} > {last}");
        last = dist;
    }
}

#[test]
fn stage1_is_seeded() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let y0 = smooth_window(2, 16, 0.0);
    let a = stage1_recover_with_rng(
        &oracle,
        &y0,
        1.0,
        &tau(),
        &s,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let b = stage1_recover_with_rng(
        &oracle,
        &y0,
        1.0,
        &tau(),
        &s,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    assert_eq!(a.0, b.0);
    let mut bad = y0.clone();
    bad.data_mut()[3] = f64::NAN;
    assert!(stage1_recover(&oracle, &bad, &guidance(1.0, 0), &s).is_err());
}

#[test]
fn outlier_examples() {
    let y0 = smooth_window(3, 50, 0.0);
    for scale in [OutlierScale::InputStd, OutlierScale::ResidualMad] {
        let r = detect_outliers_with(&y0, &y0, scale).unwrap();
        assert_eq!(r.fraction, 0.0);
        assert!(r.mask.bits().iter().all(|b| *b));
    }

    // Single 10σ spike on one channel of an otherwise exact reconstruction.
    let x = y0.clone();
    let mut y = y0.clone();
    let row_std = {
        let row = &y0.data()[50..100];
        let mean = row.iter().sum::<f64>() / 50.0;
        (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt()
    };
    y.data_mut()[50 + 20] += 10.0 * row_std;
    for scale in [OutlierScale::InputStd, OutlierScale::ResidualMad] {
        let r = detect_outliers_with(&x, &y, scale).unwrap();
        let flagged: Vec<usize> = (0..150).filter(|&k| !r.mask.bits()[k]).collect();
        assert_eq!(flagged, vec![70], "{scale}");
    }
    assert_eq!(detect_outliers(&x, &y).unwrap().fraction, 1.0 / 150.0);
}

#[test]
fn branch_threshold_is_strict() {
    assert!(needs_stage2(0.10, 0.1));
    assert!(needs_stage2(0.5, 0.1));
    assert!(!needs_stage2(0.0999, 0.1));
    assert!(!needs_stage2(0.0, 0.1));
}

proptest! {
    #[test]
    fn detection_is_scale_equivariant(seed in any::<u64>(), ch in 0usize..3, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = standard_normal([3, 40], &mut rng);
        let mut x = y.add(&standard_normal([3, 40], &mut rng).scale(0.3).unwrap()).unwrap();
        for k in 0..6 {
            x.data_mut()[rng.random_range(0..120)] += 5.0 * (k as f64 - 2.5);
        }
        for scale in [OutlierScale::InputStd, OutlierScale::ResidualMad] {
            let base = detect_outliers_with(&x, &y, scale).unwrap();
            let (mut xs, mut ys) = (x.clone(), y.clone());
            for k in ch * 40..(ch + 1) * 40 {
                xs.data_mut()[k] *= c;
                ys.data_mut()[k] *= c;
            }
            let scaled = detect_outliers_with(&xs, &ys, scale).unwrap();
            // Exact ties at the threshold can move under rounding; none arise for
            // continuous draws.
            prop_assert_eq!(&base.mask.bits()[ch * 40..(ch + 1) * 40], &scaled.mask.bits()[ch * 40..(ch + 1) * 40]);
        }
    }
}

#[test]
fn diffuse_known_examples() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y0 = standard_normal([2, 6], &mut rng);
    let eps = standard_normal([2, 6], &mut rng);
    assert_eq!(
        diffuse_known(&y0, 1, &s, &tau(), &eps).unwrap(),
        y0,
        "τ₀ = 0 anchor"
    );
    let zero = Tensor::zeros([2, 6]);
    let ab = s.alpha_bar(tau().at(4));
    assert_eq!(
        diffuse_known(&y0, 5, &s, &tau(), &zero).unwrap(),
        y0.scale(ab.sqrt()).unwrap()
    );

    let draws = standard_normal([1, 10_000], &mut rng);
    let out = diffuse_known(&Tensor::zeros([1, 10_000]), 5, &s, &tau(), &draws).unwrap();
    let var = out.data().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn combine_masked_checkerboard() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let known = standard_normal([5, 7], &mut rng);
    let generated = standard_normal([5, 7], &mut rng);
    let mask = ObservabilityMask::from_fn(5, 7, |m, t| (m + t) % 2 == 0);
    let out = combine_masked(&known, &generated, &mask).unwrap();
    for m in 0..5 {
        for t in 0..7 {
            let src = if mask.get(m, t) { &known } else { &generated };
            assert_eq!(out.data()[m * 7 + t], src.data()[m * 7 + t]);
        }
    }
    assert_eq!(
        combine_masked(&known, &generated, &ObservabilityMask::filled(5, 7, true)).unwrap(),
        known
    );
    assert_eq!(
        combine_masked(&known, &generated, &ObservabilityMask::filled(5, 7, false)).unwrap(),
        generated
    );
}

#[test]
fn resample_step_examples() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = standard_normal([4, 8], &mut rng);
    let beta = s.beta(tau().at(6));
    let zero = Tensor::zeros([4, 8]);
    assert_eq!(
        resample_step(&x, 6, &s, &tau(), &zero).unwrap(),
        x.scale((1.0 - beta).sqrt()).unwrap()
    );
    let tiny = VarianceSchedule::from_betas(vec![1e-300; 4]).unwrap();
    let t4 = Subsequence::uniform(4, 4).unwrap();
    let eps = standard_normal([4, 8], &mut rng);
    assert!(max_abs_diff(&resample_step(&x, 2, &tiny, &t4, &eps).unwrap(), &x) < 1e-140);

    let d = 32.0;
    let norm2 = x.data().iter().map(|v| v * v).sum::<f64>();
    let trials = 20_000;
    let mean: f64 = (0..trials)
        .map(|_| {
            let out = resample_step(&x, 6, &s, &tau(), &standard_normal([4, 8], &mut rng)).unwrap();
            out.data().iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        / trials as f64;
    let expected = (1.0 - beta) * norm2 + beta * d;
    assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
}

#[test]
fn all_trusted_mask_passes_scaled_measurements() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let y0 = smooth_window(3, 16, 0.2);
    let mask = ObservabilityMask::filled(3, 16, true);
    let ab = s.alpha_bar(tau().at(1));
    for r in [1, 2, 3] {
        let (out, trace) = stage2_impute(&oracle, &y0, &mask, &impute_cfg(r, 7), &s).unwrap();
        assert_eq!(out, y0.scale(ab.sqrt()).unwrap());
        assert_eq!(trace.records.len(), tau().len());
    }
    let mut cfg = impute_cfg(2, 7);
    cfg.rescale_observed = true;
    assert_eq!(stage2_impute(&oracle, &y0, &mask, &cfg, &s).unwrap().0, y0);
    assert_eq!(DEFAULT_RESAMPLE, 2);
}

fn random_mask(rng: &mut ChaCha8Rng, m: usize, t: usize) -> ObservabilityMask {
    let p = rng.random_range(0.05..0.9);
    let bits = (0..m * t).map(|_| rng.random::<f64>() > p).collect();
    ObservabilityMask::new(m, t, bits).unwrap()
}

/// Observed entries come out as exactly `√ᾱ_{τ₁}·y₀`, and the value stored
/// at an untrusted entry never influences the result.
#[test]
fn imputation_provenance_over_random_pairs() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let ab = s.alpha_bar(tau().at(1));
    for case in 0..100 {
        let y0 = standard_normal([4, 16], &mut rng);
        let mask = random_mask(&mut rng, 4, 16);
        let cfg = impute_cfg(1 + case % 3, rng.random());
        let (clean, _) = stage2_impute(&oracle, &y0, &mask, &cfg, &s).unwrap();
        let mut poisoned = y0.clone();
        for k in 0..64 {
            if !mask.bits()[k] {
                poisoned.data_mut()[k] = f64::NAN;
            }
        }
        let (out, _) = stage2_impute(&oracle, &poisoned, &mask, &cfg, &s).unwrap();
        assert!(out.is_finite(), "case {case}");
        assert_eq!(out, clean, "case {case}");
        for k in 0..64 {
            if mask.bits()[k] {
                assert_eq!(
                    out.data()[k],
                    y0.data()[k] * ab.sqrt(),
                    "case {case} entry {k}"
                );
            }
        }
    }
}

#[test]
fn more_resampling_keeps_observed_entries_and_is_seeded() {
    let s = sched();
    let oracle = GaussianOracle(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let y0 = standard_normal([3, 16], &mut rng);
    let mask = random_mask(&mut rng, 3, 16);
    let outs: Vec<Tensor> = (1..=4)
        .map(|r| {
            stage2_impute(&oracle, &y0, &mask, &impute_cfg(r, 9), &s)
                .unwrap()
                .0
        })
        .collect();
    for out in &outs[1..] {
        for k in 0..48 {
            if mask.bits()[k] {
                assert_eq!(out.data()[k], outs[0].data()[k]);
            }
        }
    }
    assert_eq!(
        stage2_impute(&oracle, &y0, &mask, &impute_cfg(3, 9), &s)
            .unwrap()
            .0,
        outs[2]
    );
}
