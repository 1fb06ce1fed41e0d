use std::sync::OnceLock;

use tsdm_core::config::RunConfig;
use tsdm_core::denoiser::{train, Denoiser, NormStats, TrainConfig};
use tsdm_core::guidance::needs_stage2;
use tsdm_core::matrix::{MeasurementMatrix, ObservabilityMask};
use tsdm_core::pipeline::{recover, recover_batch, RecoveryResult, StageTaken, TsdmConfig};
use tsdm_core::sampler::SamplerTrace;
use tsdm_core::schedule::VarianceSchedule;
use tsdm_core::threat::{
    inject_spread_attack, make_loss_mask, synth_windows, AttackKind, MaskSpec, SynthSpec,
};

struct Fixture {
    model: Denoiser,
    sched: VarianceSchedule,
    cfg: TsdmConfig,
    held_out: Vec<MeasurementMatrix>,
}

/// A model trained once per test binary: smaller than the acceptance model,
/// with a higher learning rate to compensate.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let run = RunConfig::default();
        let spec = SynthSpec::default();
        let windows = synth_windows(&spec, 0..1000).unwrap();
        let norm = NormStats::fit(&windows).unwrap();
        let data: Vec<_> = windows.iter().map(|w| norm.normalize(w).unwrap()).collect();
        let sched = run.variance_schedule().unwrap();
        let config = run.denoiser_config(spec.channels);
        let tcfg = TrainConfig {
            epochs: 10,
            learning_rate: 3e-3,
            ..run.train_config()
        };
        let params = train(&data, &config, &tcfg, &sched).unwrap().params;
        Fixture {
            model: Denoiser {
                config,
                params,
                norm,
            },
            sched,
            cfg: run.tsdm_config().unwrap(),
            held_out: synth_windows(&spec, 10_000..10_008).unwrap(),
        }
    })
}

/// Drops wall-clock fields, which legitimately differ between runs.
fn timeless(mut r: RecoveryResult) -> RecoveryResult {
    let clear = |t: &mut SamplerTrace| t.records.iter_mut().for_each(|rec| rec.elapsed_ms = 0.0);
    clear(&mut r.stage1_trace);
    r.stage2_trace.as_mut().map(clear);
    r
}

#[test]
fn clean_window_stays_in_stage1() {
    let f = fixture();
    let r = recover(&f.model, &f.held_out[0], None, &f.cfg, &f.sched).unwrap();
    eprintln!("clean fraction {}", r.outlier_fraction);
    assert_eq!(r.stage_taken, StageTaken::Stage1Only);
    assert!(r.outlier_fraction < 0.05);
    assert!(r.stage2_trace.is_none());
    assert_eq!(r.x_tilde.shape(), f.held_out[0].shape());
}

#[test]
fn channel_loss_takes_stage2_and_keeps_observed_entries() {
    let f = fixture();
    let x = &f.held_out[1];
    let spec = MaskSpec::nonrandom_for_ratio(8, 64, 0.3, 5).unwrap();
    let known = make_loss_mask(8, 64, &spec).unwrap();
    let r = recover(&f.model, x, Some(&known), &f.cfg, &f.sched).unwrap();
    assert_eq!(r.stage_taken, StageTaken::Stage1PlusStage2);
    assert!(r.outlier_fraction >= 0.3);
    let ab = f.sched.alpha_bar(f.cfg.impute.tau.at(1)).sqrt();
    let norm = &f.model.norm;
    let z = norm.normalize(x).unwrap();
    let z_tilde = norm.normalize(&r.x_tilde).unwrap();
    for m in 0..8 {
        for t in 0..64 {
            if r.outlier_mask.get(m, t) {
                let expected = ab * z.data()[m * 64 + t];
                assert!(
                    (z_tilde.data()[m * 64 + t] - expected).abs() < 1e-9,
                    "({m},{t})"
                );
            } else if !known.get(m, t) {
                assert!(r.x_tilde.get(m, t).is_finite());
            }
        }
    }
}

#[test]
fn strong_step_attack_is_detected_and_repaired() {
    let f = fixture();
    let (y, truth) = inject_spread_attack(&f.held_out[2], AttackKind::Step, 0.2, 5.0, 17).unwrap();
    let r = recover(&f.model, &y, None, &f.cfg, &f.sched).unwrap();
    eprintln!(
        "attack fraction {} (truth {})",
        r.outlier_fraction,
        truth.fraction_set()
    );
    assert!(
        (0.15..=0.30).contains(&r.outlier_fraction),
        "{}",
        r.outlier_fraction
    );
    assert_eq!(r.stage_taken, StageTaken::Stage1PlusStage2);
}

#[test]
fn stage_choice_follows_the_fraction() {
    let f = fixture();
    for k in 0..4 {
        let (y, _) = inject_spread_attack(
            &f.held_out[k],
            AttackKind::Step,
            0.05 * k as f64 + 0.01,
            4.0,
            k as u64,
        )
        .unwrap();
        let r = recover(&f.model, &y, None, &f.cfg, &f.sched).unwrap();
        let stage2 = needs_stage2(r.outlier_fraction, f.cfg.outlier_branch_threshold);
        assert_eq!(r.stage_taken == StageTaken::Stage1PlusStage2, stage2);
        assert_eq!(r.stage2_trace.is_some(), stage2);
        assert_eq!(r.outlier_fraction, r.outlier_mask.missing_fraction());
    }
}

#[test]
fn recovering_a_clean_output_adds_no_outliers() {
    let f = fixture();
    let first = recover(&f.model, &f.held_out[3], None, &f.cfg, &f.sched).unwrap();
    assert_eq!(first.stage_taken, StageTaken::Stage1Only);
    let second = recover(&f.model, &first.x_tilde, None, &f.cfg, &f.sched).unwrap();
    assert!(second.outlier_fraction <= first.outlier_fraction);
}

#[test]
fn batch_matches_single_recoveries() {
    let f = fixture();
    let windows: Vec<_> = f
        .held_out
        .iter()
        .enumerate()
        .map(|(k, w)| {
            inject_spread_attack(w, AttackKind::Step, 0.1, 3.0, k as u64)
                .unwrap()
                .0
        })
        .collect();
    let unwrap = |v: Vec<tsdm_core::Result<_>>| {
        v.into_iter()
            .map(|r| timeless(r.unwrap()))
            .collect::<Vec<_>>()
    };
    let serial = unwrap(recover_batch(&f.model, &windows, None, &f.cfg, &f.sched, 1).unwrap());
    let parallel = unwrap(recover_batch(&f.model, &windows, None, &f.cfg, &f.sched, 4).unwrap());
    assert_eq!(serial, parallel);

    let single = timeless(recover(&f.model, &windows[0], None, &f.cfg, &f.sched).unwrap());
    let one = unwrap(recover_batch(&f.model, &windows[..1], None, &f.cfg, &f.sched, 1).unwrap());
    assert_eq!(one[0], single);

    let order = [5, 2, 7, 0, 1, 6, 3, 4];
    let permuted: Vec<_> = order.iter().map(|&k| windows[k].clone()).collect();
    let shuffled = unwrap(recover_batch(&f.model, &permuted, None, &f.cfg, &f.sched, 3).unwrap());
    for (slot, &k) in order.iter().enumerate() {
        assert_eq!(shuffled[slot], serial[k]);
    }
}

#[test]
fn batch_reports_failures_per_window() {
    let f = fixture();
    let windows = f.held_out[..3].to_vec();
    let masks = vec![
        ObservabilityMask::filled(8, 64, true),
        ObservabilityMask::filled(8, 64, true),
        ObservabilityMask::filled(8, 64, true),
    ];
    let mut bad = windows.clone();
    bad[1].set(0, 0, f64::INFINITY);
    let out = recover_batch(&f.model, &bad, Some(&masks), &f.cfg, &f.sched, 2).unwrap();
    assert!(out[0].is_ok() && out[1].is_err() && out[2].is_ok());
    assert!(recover_batch(&f.model, &windows, Some(&masks[..2]), &f.cfg, &f.sched, 2).is_err());
}

#[test]
fn recovery_is_seeded() {
    let f = fixture();
    let (y, _) = inject_spread_attack(&f.held_out[4], AttackKind::Step, 0.2, 4.0, 3).unwrap();
    let a = timeless(recover(&f.model, &y, None, &f.cfg, &f.sched).unwrap());
    let b = timeless(recover(&f.model, &y, None, &f.cfg, &f.sched).unwrap());
    assert_eq!(a, b);
    let c = recover(&f.model, &y, None, &f.cfg.with_seed(99), &f.sched).unwrap();
    assert_ne!(a.x_tilde, c.x_tilde);
}
