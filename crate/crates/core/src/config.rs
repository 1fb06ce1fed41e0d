//! `RunConfig`: the flat `key = value` document that drives every command.
//!
//! Lines are `key = value`; `#` starts a comment and blank lines are ignored.
//! Every key has a default, unknown or repeated keys are errors, and lists
//! are comma separated (an empty value is an empty list).

use std::fmt;
use std::str::FromStr;

use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Result, TsdmError};
use crate::guidance::{OutlierScale, DEFAULT_BRANCH_THRESHOLD, DEFAULT_OMEGA};
use crate::impute::DEFAULT_RESAMPLE;
use crate::pipeline::TsdmConfig;
use crate::schedule::{
    Subsequence, SubsequenceStrategy, VarianceSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_STEPS, DEFAULT_SUBSEQUENCE_LEN,
};
use crate::threat::{AttackKind, MaskKind, MaskSpec, SynthMode, SynthSpec, DEFAULT_GAMMA_SHAPE};

/// Which knob `sweep` varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Attack or loss ratio.
    Ratio,
    Omega,
    Resample,
}

/// The corruption `sweep` and `eval` apply to held-out windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Attack,
    Rm,
    Nm,
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = TsdmError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(TsdmError::invalid(format!(
                        "unknown {} {other:?}",
                        stringify!($name)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(SweepParam { Ratio => "ratio", Omega => "omega", Resample => "resample" });
keyword_enum!(Scenario { Attack => "attack", Rm => "rm", Nm => "nm" });

/// A window shape `MxT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for Shape {
    type Err = TsdmError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TsdmError::invalid(format!("shape {s:?} is not MxT"));
        let (r, c) = s.split_once('x').ok_or_else(bad)?;
        Ok(Shape {
            rows: r.parse().map_err(|_| bad())?,
            cols: c.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub subsequence_len: usize,
    pub strategy: SubsequenceStrategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub kernel: usize,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub shuffle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSection {
    pub omega: f64,
    pub resample: usize,
    pub rescale_observed: bool,
    pub outlier_threshold: f64,
    pub outlier_scale: OutlierScale,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSection {
    pub mode: SynthMode,
    pub channels: usize,
    pub len: usize,
    /// Windows emitted by `synth`.
    pub count: usize,
    /// Index of the first emitted window.
    pub start: usize,
    pub day_period: f64,
    pub week_period: f64,
    pub ramp: f64,
    pub noise: f64,
    pub event_at: f64,
    pub damping: f64,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSection {
    pub kind: AttackKind,
    /// Explicit channels; empty spreads the attack over every channel.
    pub channels: Vec<usize>,
    pub t_start: usize,
    pub t_end: usize,
    /// Share of each channel attacked when spreading.
    pub ratio: f64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSection {
    pub kind: MaskKind,
    pub ratio: f64,
    pub gamma_shape: f64,
    /// Explicit lost channels for `nm`; empty derives them from `ratio`.
    pub channels: Vec<usize>,
    pub span_start: usize,
    pub span_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub scenario: Scenario,
    /// Held-out windows scored per grid point.
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSection {
    pub shapes: Vec<Shape>,
    pub s_values: Vec<usize>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsSection {
    pub data: String,
    pub model: String,
    pub truth: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pipeline: PipelineSection,
    pub synth: SynthSection,
    pub attack: AttackSection,
    pub mask: MaskSection,
    /// Per-channel RMSE weights; empty means all ones.
    pub weights: Vec<f64>,
    pub sweep: SweepSection,
    pub bench: BenchSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = DenoiserConfig::default();
        let train = TrainConfig::default();
        let synth = SynthSpec::default();
        Self {
            seed: 42,
            schedule: ScheduleSection {
                steps: DEFAULT_STEPS,
                beta_start: DEFAULT_BETA_START,
                beta_end: DEFAULT_BETA_END,
                subsequence_len: DEFAULT_SUBSEQUENCE_LEN,
                strategy: SubsequenceStrategy::Uniform,
            },
            model: ModelSection {
                base_width: model.base_width,
                depth: model.depth,
                time_embed_dim: model.time_embed_dim,
                kernel: model.kernel,
                groups: model.groups,
            },
            train: TrainSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                learning_rate: train.learning_rate,
                grad_clip: train.grad_clip,
                shuffle: train.shuffle,
            },
            pipeline: PipelineSection {
                omega: DEFAULT_OMEGA,
                resample: DEFAULT_RESAMPLE,
                rescale_observed: false,
                outlier_threshold: DEFAULT_BRANCH_THRESHOLD,
                outlier_scale: OutlierScale::default(),
                workers: 1,
            },
            synth: SynthSection {
                mode: synth.mode,
                channels: synth.channels,
                len: synth.len,
                count: 100,
                start: 0,
                day_period: synth.day_period,
                week_period: synth.week_period,
                ramp: synth.ramp,
                noise: synth.noise,
                event_at: synth.event_at,
                damping: synth.damping,
                frequency: synth.frequency,
            },
            attack: AttackSection {
                kind: AttackKind::Step,
                channels: Vec::new(),
                t_start: 0,
                t_end: 0,
                ratio: 0.2,
                magnitude: 3.0,
            },
            mask: MaskSection {
                kind: MaskKind::RandomMissing,
                ratio: 0.3,
                gamma_shape: DEFAULT_GAMMA_SHAPE,
                channels: Vec::new(),
                span_start: 0,
                span_end: 0,
            },
            weights: Vec::new(),
            sweep: SweepSection {
                param: SweepParam::Ratio,
                values: vec![0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
                scenario: Scenario::Attack,
                windows: 20,
            },
            bench: BenchSection {
                shapes: vec![Shape { rows: 8, cols: 64 }, Shape { rows: 8, cols: 128 }],
                s_values: vec![10, 100],
                repeats: 3,
            },
            paths: PathsSection {
                data: String::new(),
                model: String::new(),
                truth: String::new(),
                mask: String::new(),
            },
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

trait Scalar: FromStr + fmt::Display {}

impl<T: Scalar> Value for T {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse()
            .map_err(|_| TsdmError::invalid(format!("cannot read {s:?}")))
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: Scalar> Value for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|item| T::parse_value(item.trim()))
            .collect()
    }

    fn render(&self) -> String {
        self.iter().map(T::to_string).collect::<Vec<_>>().join(",")
    }
}

/// Numbers must be finite.
impl Value for f64 {
    fn parse_value(s: &str) -> Result<Self> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(TsdmError::invalid(format!("{s:?} is not a finite number"))),
        }
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Vec<f64> {
    fn parse_value(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|item| f64::parse_value(item.trim()))
            .collect()
    }

    fn render(&self) -> String {
        self.iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Scalar for u64 {}
impl Scalar for usize {}
impl Scalar for bool {}
impl Scalar for String {}
impl Scalar for Shape {}
impl Scalar for SubsequenceStrategy {}
impl Scalar for OutlierScale {}
impl Scalar for AttackKind {}
impl Scalar for MaskKind {}
impl Scalar for SynthMode {}
impl Scalar for SweepParam {}
impl Scalar for Scenario {}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $doc:literal;)+) => {
        /// Every key with its description, in canonical order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),+];

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = Value::parse_value(value)?,)+
                    other => return Err(TsdmError::invalid(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` for every key, in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),+]
            }
        }
    };
}

config_keys! {
    "seed" => seed: "master seed; every random stream is derived from it";
    "schedule.steps" => schedule.steps: "diffusion steps N";
    "schedule.beta_start" => schedule.beta_start: "first noise variance beta_1";
    "schedule.beta_end" => schedule.beta_end: "last noise variance beta_N";
    "schedule.subsequence_len" => schedule.subsequence_len: "accelerated steps s";
    "schedule.strategy" => schedule.strategy: "subsequence spacing: uniform or quadratic";
    "model.base_width" => model.base_width: "channels of the first U-Net stage";
    "model.depth" => model.depth: "number of down/up sampling stages";
    "model.time_embed_dim" => model.time_embed_dim: "sinusoidal step embedding width";
    "model.kernel" => model.kernel: "odd convolution kernel size";
    "model.groups" => model.groups: "group normalization groups";
    "train.epochs" => train.epochs: "passes over the training windows";
    "train.batch_size" => train.batch_size: "windows per optimizer step";
    "train.learning_rate" => train.learning_rate: "Adam step size";
    "train.grad_clip" => train.grad_clip: "global gradient-norm ceiling";
    "train.shuffle" => train.shuffle: "reshuffle windows every epoch";
    "guidance.omega" => pipeline.omega: "Stage 1 guidance strength";
    "impute.resample" => pipeline.resample: "Stage 2 passes per reverse step R";
    "impute.rescale_observed" => pipeline.rescale_observed: "return trusted entries unscaled";
    "pipeline.outlier_threshold" => pipeline.outlier_threshold: "untrusted share that triggers Stage 2";
    "pipeline.outlier_scale" => pipeline.outlier_scale: "outlier scale: residual_mad or input_std";
    "pipeline.workers" => pipeline.workers: "threads for batch recovery";
    "synth.mode" => synth.mode: "steady or transient";
    "synth.channels" => synth.channels: "channels M";
    "synth.len" => synth.len: "samples per window T";
    "synth.count" => synth.count: "windows emitted";
    "synth.start" => synth.start: "index of the first emitted window";
    "synth.day_period" => synth.day_period: "samples per simulated day";
    "synth.week_period" => synth.week_period: "samples per simulated week";
    "synth.ramp" => synth.ramp: "drift across one window";
    "synth.noise" => synth.noise: "white noise relative to channel gain";
    "synth.event_at" => synth.event_at: "transient event time as a share of the window";
    "synth.damping" => synth.damping: "transient damping ratio";
    "synth.frequency" => synth.frequency: "transient natural frequency, rad/sample";
    "attack.kind" => attack.kind: "step, ramp, random, replay, phase_shift or amplitude_scale";
    "attack.channels" => attack.channels: "attacked channels; empty spreads over all channels";
    "attack.t_start" => attack.t_start: "first attacked sample (explicit channels)";
    "attack.t_end" => attack.t_end: "end of the attacked span, exclusive (explicit channels)";
    "attack.ratio" => attack.ratio: "share of each channel attacked (spread)";
    "attack.magnitude" => attack.magnitude: "attack size, in channel standard deviations for step/ramp/random";
    "mask.kind" => mask.kind: "rm (random) or nm (non-random) loss";
    "mask.ratio" => mask.ratio: "expected lost share";
    "mask.gamma_shape" => mask.gamma_shape: "shape of the per-column loss distribution (rm)";
    "mask.channels" => mask.channels: "lost channels (nm); empty derives them from mask.ratio";
    "mask.span_start" => mask.span_start: "first lost sample (nm, explicit channels)";
    "mask.span_end" => mask.span_end: "end of the lost span, exclusive (nm, explicit channels)";
    "metrics.weights" => weights: "per-channel RMSE weights; empty means all ones";
    "sweep.param" => sweep.param: "ratio, omega or resample";
    "sweep.values" => sweep.values: "grid of values for sweep.param";
    "sweep.scenario" => sweep.scenario: "attack, rm or nm";
    "sweep.windows" => sweep.windows: "held-out windows per grid point";
    "bench.shapes" => bench.shapes: "window shapes MxT to time";
    "bench.s_values" => bench.s_values: "subsequence lengths to time";
    "bench.repeats" => bench.repeats: "timed runs per point";
    "paths.data" => paths.data: "input windows CSV";
    "paths.model" => paths.model: "checkpoint file";
    "paths.truth" => paths.truth: "clean reference windows CSV";
    "paths.mask" => paths.mask: "known-entry mask CSV";
}

fn parse_error(line: usize, message: impl Into<String>) -> TsdmError {
    TsdmError::Parse {
        line,
        message: message.into(),
    }
}

impl RunConfig {
    /// Reads a document over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_error(line_no, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(parse_error(line_no, format!("key {key:?} given twice")));
            }
            cfg.set(key, value)
                .map_err(|e| parse_error(line_no, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key.trim(), value.trim())?;
        self.validate()
    }

    /// Canonical text: every key, in order. Parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| {
                if v.is_empty() {
                    format!("{k} =\n")
                } else {
                    format!("{k} = {v}\n")
                }
            })
            .collect()
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.variance_schedule()?;
        self.subsequence()?;
        self.denoiser_config(self.synth.channels).validate()?;
        self.train_config().validate()?;
        self.tsdm_config()?.validate()?;
        self.synth_spec().validate()?;
        if self.pipeline.workers == 0 {
            return Err(TsdmError::invalid("pipeline.workers must be at least 1"));
        }
        if self.weights.iter().any(|w| *w < 0.0) {
            return Err(TsdmError::invalid("metrics.weights must be nonnegative"));
        }
        if !(self.attack.ratio > 0.0 && self.attack.ratio <= 1.0) {
            return Err(TsdmError::invalid("attack.ratio outside (0, 1]"));
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio < 1.0) || !(self.mask.gamma_shape > 0.0) {
            return Err(TsdmError::invalid(
                "mask.ratio outside (0, 1) or mask.gamma_shape not positive",
            ));
        }
        if self.sweep.windows == 0 || self.bench.repeats == 0 || self.synth.count == 0 {
            return Err(TsdmError::invalid(
                "window and repeat counts must be positive",
            ));
        }
        if self
            .bench
            .s_values
            .iter()
            .any(|&s| s == 0 || s > self.schedule.steps)
        {
            return Err(TsdmError::invalid(
                "bench.s_values must lie in 1..=schedule.steps",
            ));
        }
        Ok(())
    }

    pub fn variance_schedule(&self) -> Result<VarianceSchedule> {
        let s = &self.schedule;
        VarianceSchedule::linear(s.steps, s.beta_start, s.beta_end)
    }

    pub fn subsequence(&self) -> Result<Subsequence> {
        let s = &self.schedule;
        Subsequence::new(s.steps, s.subsequence_len, s.strategy)
    }

    pub fn denoiser_config(&self, channels: usize) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            channels_in: channels,
            base_width: m.base_width,
            depth: m.depth,
            time_embed_dim: m.time_embed_dim,
            kernel: m.kernel,
            groups: m.groups,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            grad_clip: t.grad_clip,
            shuffle: t.shuffle,
        }
    }

    pub fn tsdm_config(&self) -> Result<TsdmConfig> {
        let p = &self.pipeline;
        let mut cfg = TsdmConfig::new(self.subsequence()?, self.seed);
        cfg.guidance.omega = p.omega;
        cfg.impute.resample = p.resample;
        cfg.impute.rescale_observed = p.rescale_observed;
        cfg.outlier_branch_threshold = p.outlier_threshold;
        cfg.outlier_scale = p.outlier_scale;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            mode: s.mode,
            channels: s.channels,
            len: s.len,
            day_period: s.day_period,
            week_period: s.week_period,
            ramp: s.ramp,
            noise: s.noise,
            event_at: s.event_at,
            damping: s.damping,
            frequency: s.frequency,
            seed: self.seed,
        }
    }

    /// Loss mask spec for an `rows×cols` window; `salt` separates windows.
    pub fn mask_spec(&self, rows: usize, cols: usize, salt: u64) -> Result<MaskSpec> {
        let m = &self.mask;
        let seed = self.seed ^ 0x4D41_534B ^ salt.wrapping_mul(0x9E37_79B9);
        match m.kind {
            MaskKind::RandomMissing => Ok(MaskSpec {
                gamma_shape: m.gamma_shape,
                ..MaskSpec::random_missing(m.ratio, seed)
            }),
            MaskKind::NonrandomMissing if m.channels.is_empty() => {
                MaskSpec::nonrandom_for_ratio(rows, cols, m.ratio, seed)
            }
            MaskKind::NonrandomMissing => Ok(MaskSpec {
                seed,
                ..MaskSpec::nonrandom_missing(m.channels.clone(), m.span_start..m.span_end)
            }),
        }
    }

    /// Seed of the attack on window `salt`.
    pub fn attack_seed(&self, salt: u64) -> u64 {
        self.seed ^ 0x4154_5441_434B ^ salt.wrapping_mul(0x9E37_79B9)
    }

    /// Channel weights, all ones when none are configured.
    pub fn channel_weights(&self, channels: usize) -> Result<Vec<f64>> {
        if self.weights.is_empty() {
            return Ok(vec![1.0; channels]);
        }
        if self.weights.len() != channels {
            return Err(TsdmError::invalid(format!(
                "{} weights configured for {channels} channels",
                self.weights.len()
            )));
        }
        Ok(self.weights.clone())
    }
}
