use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use tsdm_core::baseline::baseline_interpolate;
use tsdm_core::bench::{bench_csv, bench_timing};
use tsdm_core::config::{RunConfig, Scenario, SweepParam};
use tsdm_core::denoiser::{
    decode_checkpoint, encode_checkpoint, train_with_progress, Denoiser, NormStats,
};
use tsdm_core::io::{
    format_dataset_csv, format_mask_dataset_csv, parse_dataset_csv, parse_mask_dataset_csv,
};
use tsdm_core::matrix::{FlagMap, MeasurementMatrix, ObservabilityMask};
use tsdm_core::metrics::{detection_metrics, masked_rmse, weighted_rmse, MetricReport};
use tsdm_core::pipeline::{recover_batch, RecoveryResult, StageTaken};
use tsdm_core::threat::{
    apply_loss, inject_fdia, inject_spread_attack, make_loss_mask, synth_windows, AttackSpec,
};

use crate::output::RunDir;
use crate::{Cli, CliError, Command};

pub fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let mut dir = RunDir::create(&cli.out)?;
    match &cli.command {
        Command::Synth => synth(cfg, &mut dir)?,
        Command::Attack => attack(cfg, &mut dir)?,
        Command::Mask => mask(cfg, &mut dir)?,
        Command::Train => train(cfg, &mut dir)?,
        Command::Recover => recover(cfg, &mut dir)?,
        Command::Eval {
            corrupted,
            outliers,
        } => eval(cfg, &mut dir, corrupted.as_deref(), outliers.as_deref())?,
        Command::Bench => bench(cfg, &mut dir)?,
        Command::Sweep => sweep(cfg, &mut dir)?,
    }
    dir.finish(cli.command.name(), cfg)
}

fn required<'a>(value: &'a str, flag: &str) -> Result<&'a str, CliError> {
    if value.is_empty() {
        Err(CliError::Usage(format!(
            "missing --{flag} (or paths.{flag} in the config)"
        )))
    } else {
        Ok(value)
    }
}

fn load_windows(
    dir: &mut RunDir,
    role: &str,
    path: &str,
) -> Result<Vec<MeasurementMatrix>, CliError> {
    Ok(parse_dataset_csv(&dir.read_input_text(role, path)?)?)
}

fn load_masks(
    dir: &mut RunDir,
    role: &str,
    path: &str,
    count: usize,
) -> Result<Vec<ObservabilityMask>, CliError> {
    let masks = parse_mask_dataset_csv(&dir.read_input_text(role, path)?)?;
    if masks.len() != count {
        return Err(CliError::Usage(format!(
            "{path}: {} masks for {count} windows",
            masks.len()
        )));
    }
    Ok(masks)
}

fn load_model(dir: &mut RunDir, path: &str) -> Result<Denoiser, CliError> {
    Ok(decode_checkpoint(&dir.read_input("model", path)?)?)
}

fn check_model(model: &Denoiser, windows: &[MeasurementMatrix]) -> Result<(), CliError> {
    if let Some(w) = windows.first() {
        if w.rows() != model.config.channels_in {
            return Err(CliError::Usage(format!(
                "model expects {} channels, data has {}",
                model.config.channels_in,
                w.rows()
            )));
        }
    }
    Ok(())
}

/// Entries of `input` that differ from `truth` or are missing.
fn corruption(truth: &MeasurementMatrix, input: &MeasurementMatrix) -> FlagMap {
    FlagMap::from_fn(truth.rows(), truth.cols(), |m, t| {
        let v = input.get(m, t);
        v.is_nan() || v.to_bits() != truth.get(m, t).to_bits()
    })
}

fn score(
    truth: &MeasurementMatrix,
    recovered: &MeasurementMatrix,
    corrupted: &FlagMap,
    detected: Option<&ObservabilityMask>,
    weights: &[f64],
) -> Result<MetricReport, CliError> {
    let (precision, recall) = match detected {
        Some(mask) => detection_metrics(&mask.flags(), corrupted)?,
        None => (f64::NAN, f64::NAN),
    };
    Ok(MetricReport {
        weighted_rmse: weighted_rmse(truth, recovered, weights)?,
        masked_rmse: masked_rmse(truth, recovered, &corrupted.to_observability())?,
        detection_precision: precision,
        detection_recall: recall,
        runtime_ms: 0,
    })
}

fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricReport {
        weighted_rmse: mean(|r| r.weighted_rmse),
        masked_rmse: mean(|r| r.masked_rmse),
        detection_precision: mean(|r| r.detection_precision),
        detection_recall: mean(|r| r.detection_recall),
        runtime_ms: reports.iter().map(|r| r.runtime_ms).sum(),
    })
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn synth(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let start = cfg.synth.start;
    let windows = synth_windows(&cfg.synth_spec(), start..start + cfg.synth.count)?;
    dir.write("dataset.csv", format_dataset_csv(&windows))?;
    println!("wrote {} windows to dataset.csv", windows.len());
    Ok(())
}

fn attack(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let windows = load_windows(dir, "data", required(&cfg.paths.data, "data")?)?;
    let a = &cfg.attack;
    let mut attacked = Vec::with_capacity(windows.len());
    let mut trusted = Vec::with_capacity(windows.len());
    for (k, x) in windows.iter().enumerate() {
        let seed = cfg.attack_seed(k as u64);
        let (y, flags) = if a.channels.is_empty() {
            inject_spread_attack(x, a.kind, a.ratio, a.magnitude, seed)?
        } else {
            let spec = AttackSpec {
                kind: a.kind,
                channels: a.channels.clone(),
                t_start: a.t_start,
                t_end: if a.t_end == 0 { x.cols() } else { a.t_end },
                magnitude: a.magnitude,
                seed,
            };
            inject_fdia(x, &spec)?
        };
        attacked.push(y);
        trusted.push(flags.to_observability());
    }
    dir.write("attacked.csv", format_dataset_csv(&attacked))?;
    dir.write("attack_mask.csv", format_mask_dataset_csv(&trusted))?;
    let share = trusted.iter().map(|m| m.missing_fraction()).sum::<f64>() / trusted.len() as f64;
    println!(
        "attacked {} windows, {:.1}% of entries",
        attacked.len(),
        100.0 * share
    );
    Ok(())
}

fn mask(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let windows = load_windows(dir, "data", required(&cfg.paths.data, "data")?)?;
    let mut lost = Vec::with_capacity(windows.len());
    let mut masks = Vec::with_capacity(windows.len());
    for (k, x) in windows.iter().enumerate() {
        let spec = cfg.mask_spec(x.rows(), x.cols(), k as u64)?;
        let known = make_loss_mask(x.rows(), x.cols(), &spec)?;
        lost.push(apply_loss(x, &known)?);
        masks.push(known);
    }
    dir.write("masked.csv", format_dataset_csv(&lost))?;
    dir.write("mask.csv", format_mask_dataset_csv(&masks))?;
    let share = masks.iter().map(|m| m.missing_fraction()).sum::<f64>() / masks.len() as f64;
    println!(
        "masked {} windows, {:.1}% missing",
        lost.len(),
        100.0 * share
    );
    Ok(())
}

fn train(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let windows = load_windows(dir, "data", required(&cfg.paths.data, "data")?)?;
    let norm = NormStats::fit(&windows)?;
    let data = windows
        .iter()
        .map(|w| norm.normalize(w))
        .collect::<Result<Vec<_>, _>>()?;
    let config = cfg.denoiser_config(windows[0].rows());
    let sched = cfg.variance_schedule()?;
    let start = Instant::now();
    let report = train_with_progress(
        &data,
        &config,
        &cfg.train_config(),
        &sched,
        |epoch, loss| {
            eprintln!("epoch {:>3}  loss {loss:.5}", epoch + 1);
        },
    )?;
    let elapsed = start.elapsed().as_millis();
    let model = Denoiser {
        config,
        params: report.params,
        norm,
    };
    dir.write("model.tsdm", encode_checkpoint(&model))?;
    let mut losses = String::from("epoch,loss\n");
    for (k, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{l:?}", k + 1);
    }
    dir.write("train_loss.csv", losses)?;
    dir.write(
        "timing_train.json",
        to_json(&serde_json::json!({ "elapsed_ms": elapsed })),
    )?;
    println!(
        "trained on {} windows in {:.1}s, final loss {:.5}",
        windows.len(),
        elapsed as f64 / 1e3,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct WindowReport {
    index: usize,
    stage_taken: StageTaken,
    outlier_fraction: f64,
    metrics: Option<MetricReport>,
}

#[derive(Serialize)]
struct RecoverReport {
    windows: Vec<WindowReport>,
    stage2_windows: usize,
    mean: Option<MetricReport>,
}

fn recover(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let model = load_model(dir, required(&cfg.paths.model, "model")?)?;
    let windows = load_windows(dir, "data", required(&cfg.paths.data, "data")?)?;
    check_model(&model, &windows)?;
    let known = match cfg.paths.mask.as_str() {
        "" => None,
        path => Some(load_masks(dir, "mask", path, windows.len())?),
    };
    let truth = match cfg.paths.truth.as_str() {
        "" => None,
        path => Some(load_windows(dir, "truth", path)?),
    };
    if truth.as_ref().is_some_and(|t| t.len() != windows.len()) {
        return Err(CliError::Usage(
            "truth and data hold different window counts".into(),
        ));
    }
    let tsdm = cfg.tsdm_config()?;
    let sched = cfg.variance_schedule()?;
    let start = Instant::now();
    let results = recover_batch(
        &model,
        &windows,
        known.as_deref(),
        &tsdm,
        &sched,
        cfg.pipeline.workers,
    )?;
    let elapsed = start.elapsed().as_millis() as u64;
    let results: Vec<RecoveryResult> = results
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            r.map_err(|e| CliError::Window {
                index: k,
                source: e,
            })
        })
        .collect::<Result<_, _>>()?;

    let weights = cfg.channel_weights(model.config.channels_in)?;
    let mut reports = Vec::with_capacity(results.len());
    for (k, r) in results.iter().enumerate() {
        let metrics = match &truth {
            Some(t) => Some(score(
                &t[k],
                &r.x_tilde,
                &corruption(&t[k], &windows[k]),
                Some(&r.outlier_mask),
                &weights,
            )?),
            None => None,
        };
        reports.push(WindowReport {
            index: k,
            stage_taken: r.stage_taken,
            outlier_fraction: r.outlier_fraction,
            metrics,
        });
    }
    let scored: Vec<MetricReport> = reports.iter().filter_map(|w| w.metrics.clone()).collect();
    let stage2 = results
        .iter()
        .filter(|r| r.stage_taken == StageTaken::Stage1PlusStage2)
        .count();
    let summary = RecoverReport {
        stage2_windows: stage2,
        mean: mean_report(&scored),
        windows: reports,
    };

    let recovered: Vec<MeasurementMatrix> = results.iter().map(|r| r.x_tilde.clone()).collect();
    let outliers: Vec<ObservabilityMask> = results.iter().map(|r| r.outlier_mask.clone()).collect();
    dir.write("recovered.csv", format_dataset_csv(&recovered))?;
    dir.write("outliers.csv", format_mask_dataset_csv(&outliers))?;
    dir.write("report.json", to_json(&summary))?;
    let mut traces = String::from("window,stage,step,sigma_bar,elapsed_ms\n");
    for (k, r) in results.iter().enumerate() {
        let stages =
            std::iter::once((1, &r.stage1_trace)).chain(r.stage2_trace.iter().map(|t| (2, t)));
        for (stage, trace) in stages {
            for rec in &trace.records {
                let _ = writeln!(
                    traces,
                    "{k},{stage},{},{},{}",
                    rec.step, rec.sigma_bar, rec.elapsed_ms
                );
            }
        }
    }
    dir.write("timing_traces.csv", traces)?;
    dir.write(
        "timing_recover.json",
        to_json(&serde_json::json!({ "runtime_ms": elapsed })),
    )?;

    println!(
        "recovered {} windows, {stage2} through stage 2",
        results.len()
    );
    if let Some(m) = &summary.mean {
        println!(
            "weighted rmse {:.5}  masked rmse {:.5}  precision {:.3}  recall {:.3}",
            m.weighted_rmse, m.masked_rmse, m.detection_precision, m.detection_recall
        );
    }
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    dir: &mut RunDir,
    corrupted: Option<&str>,
    outliers: Option<&str>,
) -> Result<(), CliError> {
    let truth = load_windows(dir, "truth", required(&cfg.paths.truth, "truth")?)?;
    let recovered = load_windows(dir, "data", required(&cfg.paths.data, "data")?)?;
    if truth.len() != recovered.len() {
        return Err(CliError::Usage(
            "truth and data hold different window counts".into(),
        ));
    }
    let rows = truth[0].rows();
    let weights = cfg.channel_weights(rows)?;
    // Scored entries: the known-missing ones, or those that differ in the
    // corrupted input.
    let damaged: Vec<FlagMap> = match (corrupted, cfg.paths.mask.as_str()) {
        (Some(path), _) => {
            let input = load_windows(dir, "corrupted", path)?;
            if input.len() != truth.len() {
                return Err(CliError::Usage(
                    "corrupted and truth hold different window counts".into(),
                ));
            }
            truth
                .iter()
                .zip(&input)
                .map(|(t, y)| corruption(t, y))
                .collect()
        }
        (None, "") => truth
            .iter()
            .map(|t| FlagMap::filled(t.rows(), t.cols(), false))
            .collect(),
        (None, path) => load_masks(dir, "mask", path, truth.len())?
            .iter()
            .map(|m| m.flags())
            .collect(),
    };
    let detected = match outliers {
        Some(path) => Some(load_masks(dir, "outliers", path, truth.len())?),
        None => None,
    };
    if detected.is_some() && corrupted.is_none() && cfg.paths.mask.is_empty() {
        return Err(CliError::Usage(
            "--outliers needs --corrupted or --mask to know what was damaged".into(),
        ));
    }
    let reports = (0..truth.len())
        .map(|k| {
            score(
                &truth[k],
                &recovered[k],
                &damaged[k],
                detected.as_ref().map(|d| &d[k]),
                &weights,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = mean_report(&reports);
    dir.write(
        "report.json",
        to_json(&serde_json::json!({ "windows": reports, "mean": mean })),
    )?;
    if let Some(m) = mean {
        println!(
            "weighted rmse {:.5}  masked rmse {:.5}",
            m.weighted_rmse, m.masked_rmse
        );
    }
    Ok(())
}

fn bench(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let sched = cfg.variance_schedule()?;
    let loaded = match cfg.paths.model.as_str() {
        "" => None,
        path => Some(load_model(dir, path)?),
    };
    let mut rows = Vec::new();
    for &shape in &cfg.bench.shapes {
        let fresh;
        let model = match &loaded {
            Some(m) if m.config.channels_in == shape.rows => m,
            Some(m) => {
                return Err(CliError::Usage(format!(
                    "model expects {} channels, bench shape {shape} has {}",
                    m.config.channels_in, shape.rows
                )))
            }
            None => {
                fresh = Denoiser::init(cfg.denoiser_config(shape.rows), cfg.seed)?;
                &fresh
            }
        };
        rows.extend(bench_timing(
            model,
            &sched,
            &[shape],
            &cfg.bench.s_values,
            cfg.bench.repeats,
            cfg.seed,
        )?);
    }
    let table = bench_csv(&rows);
    dir.write("timing_bench.csv", &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Clone, Copy)]
struct SweepRow {
    value: f64,
    tsdm_rmse: f64,
    input_rmse: f64,
    baseline_rmse: f64,
    masked_rmse: f64,
    precision: f64,
    recall: f64,
    stage2_share: f64,
}

/// Applies one grid value to a copy of the configuration.
fn sweep_config(cfg: &RunConfig, value: f64) -> Result<RunConfig, CliError> {
    let mut c = cfg.clone();
    let key = match (cfg.sweep.param, cfg.sweep.scenario) {
        (SweepParam::Ratio, Scenario::Attack) => "attack.ratio",
        (SweepParam::Ratio, _) => "mask.ratio",
        (SweepParam::Omega, _) => "guidance.omega",
        (SweepParam::Resample, _) => "impute.resample",
    };
    match cfg.sweep.scenario {
        Scenario::Attack => {}
        Scenario::Rm => c.apply("mask.kind", "rm")?,
        Scenario::Nm => c.apply("mask.kind", "nm")?,
    }
    c.apply(key, &value.to_string())
        .map_err(|e| CliError::Usage(format!("sweep value {value}: {e}")))?;
    Ok(c)
}

fn sweep_point(
    c: &RunConfig,
    model: &Denoiser,
    truth: &[MeasurementMatrix],
    value: f64,
) -> Result<SweepRow, CliError> {
    let mut inputs = Vec::with_capacity(truth.len());
    let mut known = Vec::with_capacity(truth.len());
    for (k, x) in truth.iter().enumerate() {
        if c.sweep.scenario == Scenario::Attack {
            let (y, _) = inject_spread_attack(
                x,
                c.attack.kind,
                c.attack.ratio,
                c.attack.magnitude,
                c.attack_seed(k as u64),
            )?;
            inputs.push(y);
        } else {
            let mask = make_loss_mask(
                x.rows(),
                x.cols(),
                &c.mask_spec(x.rows(), x.cols(), k as u64)?,
            )?;
            inputs.push(apply_loss(x, &mask)?);
            known.push(mask);
        }
    }
    let known = (!known.is_empty()).then_some(known);
    let results = recover_batch(
        model,
        &inputs,
        known.as_deref(),
        &c.tsdm_config()?,
        &c.variance_schedule()?,
        c.pipeline.workers,
    )?;
    let weights = c.channel_weights(model.config.channels_in)?;
    let n = truth.len() as f64;
    let mut row = SweepRow {
        value,
        tsdm_rmse: 0.0,
        input_rmse: 0.0,
        baseline_rmse: 0.0,
        masked_rmse: 0.0,
        precision: 0.0,
        recall: 0.0,
        stage2_share: 0.0,
    };
    for (k, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| CliError::Window {
            index: k,
            source: e,
        })?;
        let damaged = corruption(&truth[k], &inputs[k]);
        let trusted = damaged.to_observability();
        let base = baseline_interpolate(&inputs[k], &trusted, &model.norm.mean)?;
        let m = score(
            &truth[k],
            &r.x_tilde,
            &damaged,
            Some(&r.outlier_mask),
            &weights,
        )?;
        row.tsdm_rmse += m.weighted_rmse / n;
        row.masked_rmse += m.masked_rmse / n;
        row.precision += m.detection_precision / n;
        row.recall += m.detection_recall / n;
        row.input_rmse += weighted_rmse(&truth[k], &inputs[k], &weights)? / n;
        row.baseline_rmse += weighted_rmse(&truth[k], &base, &weights)? / n;
        if r.stage_taken == StageTaken::Stage1PlusStage2 {
            row.stage2_share += 1.0 / n;
        }
    }
    Ok(row)
}

fn sweep(cfg: &RunConfig, dir: &mut RunDir) -> Result<(), CliError> {
    let model = load_model(dir, required(&cfg.paths.model, "model")?)?;
    let windows = cfg.sweep.windows;
    let truth = match cfg.paths.truth.as_str() {
        "" => synth_windows(
            &cfg.synth_spec(),
            cfg.synth.start..cfg.synth.start + windows,
        )?,
        path => {
            let all = load_windows(dir, "truth", path)?;
            if all.len() < windows {
                return Err(CliError::Usage(format!(
                    "{path}: {} windows, sweep needs {windows}",
                    all.len()
                )));
            }
            all[..windows].to_vec()
        }
    };
    check_model(&model, &truth)?;
    let mut csv = String::from(
        "param,value,tsdm_rmse,input_rmse,baseline_rmse,masked_rmse,precision,recall,stage2_share\n",
    );
    for &value in &cfg.sweep.values {
        let c = sweep_config(cfg, value)?;
        let r = sweep_point(&c, &model, &truth, value)?;
        eprintln!(
            "{} = {value}: tsdm {:.5}  input {:.5}  baseline {:.5}",
            cfg.sweep.param, r.tsdm_rmse, r.input_rmse, r.baseline_rmse
        );
        let _ = writeln!(
            csv,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            cfg.sweep.param,
            r.value,
            r.tsdm_rmse,
            r.input_rmse,
            r.baseline_rmse,
            r.masked_rmse,
            r.precision,
            r.recall,
            r.stage2_share
        );
    }
    dir.write("sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
