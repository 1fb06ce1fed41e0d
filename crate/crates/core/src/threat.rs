//! Synthetic measurement windows, temporal false-data attacks and
//! random/non-random loss masks.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsdmError};
use crate::matrix::{
    default_channel_names, std_dev, FlagMap, MeasurementMatrix, ObservabilityMask,
};

macro_rules! named_enum {
    ($(#[$doc:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$doc])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
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

named_enum!(
    /// Temporal form of an injected attack.
    AttackKind {
        Step => "step",
        Ramp => "ramp",
        Random => "random",
        Replay => "replay",
        PhaseShift => "phase_shift",
        AmplitudeScale => "amplitude_scale",
    }
);

named_enum!(
    /// Data-loss pattern.
    MaskKind {
        RandomMissing => "rm",
        NonrandomMissing => "nm",
    }
);

named_enum!(
    SynthMode {
        Steady => "steady",
        Transient => "transient",
    }
);

/// One attack on a set of channels over `[t_start, t_end)`.
///
/// `magnitude` is in units of the channel's standard deviation for step,
/// ramp and random; a fraction of the dominant period for phase shift; the
/// relative gain for amplitude scaling; unused for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub channels: Vec<usize>,
    pub t_start: usize,
    pub t_end: usize,
    pub magnitude: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.channels.is_empty() {
            return Err(TsdmError::invalid("attack needs at least one channel"));
        }
        if let Some(&bad) = self.channels.iter().find(|&&c| c >= rows) {
            return Err(TsdmError::invalid(format!(
                "attack channel {bad} outside 0..{rows}"
            )));
        }
        if self.t_start >= self.t_end || self.t_end > cols {
            return Err(TsdmError::invalid(format!(
                "attack span {}..{} invalid for {cols} samples",
                self.t_start, self.t_end
            )));
        }
        if !self.magnitude.is_finite() {
            return Err(TsdmError::invalid("attack magnitude must be finite"));
        }
        Ok(())
    }
}

fn finite_values(xs: &[f64]) -> Vec<f64> {
    xs.iter().copied().filter(|v| !v.is_nan()).collect()
}

fn channel_std(row: &[f64]) -> f64 {
    let vals = finite_values(row);
    if vals.is_empty() {
        0.0
    } else {
        std_dev(&vals)
    }
}

/// Minimum autocorrelation a period candidate must reach.
pub const PERIOD_SIGNIFICANCE: f64 = 0.3;

/// Dominant period of a series: the lag in `2..=len/2` with the highest
/// autocorrelation among local peaks. Errors when no peak exceeds
/// [`PERIOD_SIGNIFICANCE`].
pub fn dominant_period(xs: &[f64]) -> Result<usize> {
    let n = xs.len();
    let none = || TsdmError::invalid("no significant periodicity in channel");
    if n < 4 || xs.iter().any(|v| !v.is_finite()) {
        return Err(none());
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(none());
    }
    let max_lag = n / 2;
    let acf: Vec<f64> = (0..=max_lag + 1)
        .map(|l| {
            if l >= n {
                return f64::NEG_INFINITY;
            }
            let s: f64 = (0..n - l)
                .map(|t| (xs[t] - mean) * (xs[t + l] - mean))
                .sum();
            s / (n - l) as f64 / var
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for l in 2..=max_lag {
        let peak = acf[l] >= acf[l - 1] && (l == max_lag || acf[l] >= acf[l + 1]);
        if peak && acf[l] > PERIOD_SIGNIFICANCE && best.is_none_or(|(_, b)| acf[l] > b) {
            best = Some((l, acf[l]));
        }
    }
    best.map(|(l, _)| l).ok_or_else(none)
}

/// Applies `spec` and returns the corrupted window with the map of every
/// entry that changed. Untouched entries are bit-identical.
pub fn inject_fdia(
    x: &MeasurementMatrix,
    spec: &AttackSpec,
) -> Result<(MeasurementMatrix, FlagMap)> {
    spec.validate(x.rows(), x.cols())?;
    let mut out = x.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t0, t1) = (spec.t_start, spec.t_end);
    let len = t1 - t0;
    for &ch in &spec.channels {
        let row = x.row(ch);
        let std = channel_std(row);
        let seg = &mut out.row_mut(ch)[t0..t1];
        match spec.kind {
            AttackKind::Step => {
                let offset = spec.magnitude * std;
                seg.iter_mut().for_each(|v| *v += offset);
            }
            AttackKind::Ramp => {
                let top = spec.magnitude * std;
                let denom = (len.max(2) - 1) as f64;
                for (k, v) in seg.iter_mut().enumerate() {
                    *v += top * k as f64 / denom;
                }
            }
            AttackKind::Random => {
                let noise = Normal::new(0.0, (spec.magnitude * std).abs())
                    .map_err(|e| TsdmError::invalid(e.to_string()))?;
                seg.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            AttackKind::Replay => {
                if t0 < len {
                    return Err(TsdmError::invalid(format!(
                        "replay of {len} samples needs history before t={t0}"
                    )));
                }
                seg.copy_from_slice(&row[t0 - len..t0]);
            }
            AttackKind::PhaseShift => {
                let period = dominant_period(row)?;
                let shift = (spec.magnitude * period as f64).round() as i64;
                let shift = shift.rem_euclid(len as i64) as usize;
                let src = row[t0..t1].to_vec();
                for (k, v) in seg.iter_mut().enumerate() {
                    *v = src[(k + len - shift) % len];
                }
            }
            AttackKind::AmplitudeScale => {
                seg.iter_mut().for_each(|v| *v *= 1.0 + spec.magnitude);
            }
        }
    }
    let flags = FlagMap::from_fn(x.rows(), x.cols(), |m, t| {
        x.get(m, t).to_bits() != out.get(m, t).to_bits()
    });
    Ok((out, flags))
}

/// Attacks every channel over its own random span of `round(ratio·T)`
/// samples, so about `ratio` of all entries are touched.
pub fn inject_spread_attack(
    x: &MeasurementMatrix,
    kind: AttackKind,
    ratio: f64,
    magnitude: f64,
    seed: u64,
) -> Result<(MeasurementMatrix, FlagMap)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TsdmError::invalid(format!(
            "attack ratio {ratio} outside (0, 1]"
        )));
    }
    let cols = x.cols();
    let len = ((ratio * cols as f64).round() as usize).clamp(1, cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for ch in 0..x.rows() {
        let lo = if kind == AttackKind::Replay { len } else { 0 };
        if lo + len > cols {
            return Err(TsdmError::invalid(
                "window too short for a replay of this ratio",
            ));
        }
        let t_start = rng.random_range(lo..=cols - len);
        let spec = AttackSpec {
            kind,
            channels: vec![ch],
            t_start,
            t_end: t_start + len,
            magnitude,
            seed: rng.random(),
        };
        out = inject_fdia(&out, &spec)?.0;
    }
    let flags = FlagMap::from_fn(x.rows(), cols, |m, t| {
        x.get(m, t).to_bits() != out.get(m, t).to_bits()
    });
    Ok((out, flags))
}

pub const DEFAULT_GAMMA_SHAPE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Expected share of missing entries (random missing).
    pub target_ratio: f64,
    /// Shape of the per-column missing-share distribution (random missing).
    pub gamma_shape: f64,
    /// Lost channels (non-random missing).
    pub channels: Vec<usize>,
    /// Lost span (non-random missing).
    pub span: Range<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn random_missing(target_ratio: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::RandomMissing,
            target_ratio,
            gamma_shape: DEFAULT_GAMMA_SHAPE,
            channels: Vec::new(),
            span: 0..0,
            seed,
        }
    }

    pub fn nonrandom_missing(channels: Vec<usize>, span: Range<usize>) -> Self {
        Self {
            kind: MaskKind::NonrandomMissing,
            target_ratio: 0.0,
            gamma_shape: DEFAULT_GAMMA_SHAPE,
            channels,
            span,
            seed: 0,
        }
    }

    /// Non-random loss of about `ratio` of an `M×T` window: `⌈2·ratio·M⌉`
    /// random channels over one shared random span.
    pub fn nonrandom_for_ratio(rows: usize, cols: usize, ratio: f64, seed: u64) -> Result<Self> {
        check_ratio(ratio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_ch = ((2.0 * ratio * rows as f64).ceil() as usize).clamp(1, rows);
        let len = ((ratio * (rows * cols) as f64 / n_ch as f64).round() as usize).clamp(1, cols);
        let mut channels = sample(&mut rng, rows, n_ch).into_vec();
        channels.sort_unstable();
        let start = rng.random_range(0..=cols - len);
        Ok(Self {
            seed,
            ..Self::nonrandom_missing(channels, start..start + len)
        })
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TsdmError::invalid(format!(
            "target ratio {ratio} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Per-column missing shares for random loss, `Gamma(k, ratio/k)` clipped to `[0, 1]`.
pub fn rm_column_fractions(cols: usize, spec: &MaskSpec, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_ratio(spec.target_ratio)?;
    let gamma = Gamma::new(spec.gamma_shape, spec.target_ratio / spec.gamma_shape)
        .map_err(|e| TsdmError::invalid(format!("gamma shape: {e}")))?;
    Ok((0..cols)
        .map(|_| gamma.sample(rng).clamp(0.0, 1.0))
        .collect())
}

/// Builds an `M×T` loss mask (`true` = observed).
pub fn make_loss_mask(rows: usize, cols: usize, spec: &MaskSpec) -> Result<ObservabilityMask> {
    if rows == 0 || cols == 0 {
        return Err(TsdmError::invalid("mask dimensions must be positive"));
    }
    match spec.kind {
        MaskKind::RandomMissing => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let fractions = rm_column_fractions(cols, spec, &mut rng)?;
            let mut mask = ObservabilityMask::filled(rows, cols, true);
            for (t, p) in fractions.into_iter().enumerate() {
                let expected = p * rows as f64;
                let mut count = expected.floor() as usize;
                if rng.random::<f64>() < expected - count as f64 {
                    count += 1;
                }
                for m in sample(&mut rng, rows, count.min(rows)) {
                    mask.set(m, t, false);
                }
            }
            Ok(mask)
        }
        MaskKind::NonrandomMissing => {
            if spec.channels.is_empty() {
                return Err(TsdmError::invalid(
                    "non-random loss needs at least one channel",
                ));
            }
            if let Some(&bad) = spec.channels.iter().find(|&&c| c >= rows) {
                return Err(TsdmError::invalid(format!(
                    "loss channel {bad} outside 0..{rows}"
                )));
            }
            if spec.span.start >= spec.span.end || spec.span.end > cols {
                return Err(TsdmError::invalid(format!(
                    "loss span {:?} invalid for {cols} samples",
                    spec.span
                )));
            }
            let mut mask = ObservabilityMask::filled(rows, cols, true);
            for &m in &spec.channels {
                for t in spec.span.clone() {
                    mask.set(m, t, false);
                }
            }
            Ok(mask)
        }
    }
}

/// Replaces untrusted entries with `NaN`.
pub fn apply_loss(x: &MeasurementMatrix, mask: &ObservabilityMask) -> Result<MeasurementMatrix> {
    if x.shape() != mask.shape() {
        return Err(TsdmError::invalid("mask shape does not match the window"));
    }
    let mut out = x.clone();
    for (v, &keep) in out.values_mut().iter_mut().zip(mask.bits()) {
        if !keep {
            *v = f64::NAN;
        }
    }
    Ok(out)
}

/// Parameters of the synthetic measurement generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub channels: usize,
    pub len: usize,
    /// Samples per simulated day.
    pub day_period: f64,
    /// Samples per simulated week.
    pub week_period: f64,
    /// Peak-to-peak size of the slow drift across one window.
    pub ramp: f64,
    /// White-noise standard deviation relative to each channel's gain.
    pub noise: f64,
    /// Transient: event time as a share of the window.
    pub event_at: f64,
    /// Transient: damping ratio ζ.
    pub damping: f64,
    /// Transient: natural angular frequency ω in radians per sample.
    pub frequency: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            mode: SynthMode::Steady,
            channels: 8,
            len: 64,
            day_period: 32.0,
            week_period: 224.0,
            ramp: 0.3,
            noise: 0.05,
            event_at: 0.25,
            damping: 0.1,
            frequency: 0.4,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self.day_period > 0.0 && self.week_period > 0.0 && self.frequency > 0.0;
        let finite = [self.ramp, self.noise, self.damping, self.event_at]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if self.channels == 0 || self.len == 0 || !positive || !finite || self.event_at > 1.0 {
            return Err(TsdmError::invalid(
                "synthetic spec has out-of-range parameters",
            ));
        }
        Ok(())
    }
}

/// Latent sources mixed into channels.
const SOURCES: usize = 4;

/// Fixed per-system quantities: mixing weights, channel levels and gains.
struct System {
    mixing: Vec<[f64; SOURCES]>,
    level: Vec<f64>,
    gain: Vec<f64>,
    phase: Vec<f64>,
}

impl System {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let m = spec.channels;
        let mixing = (0..m)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let level = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
        let gain = (0..m).map(|_| rng.random_range(0.05..0.2)).collect();
        let phase = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self {
            mixing,
            level,
            gain,
            phase,
        }
    }
}

fn window_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Windows `range` of the synthetic stream defined by `spec`. Each window is
/// a pure function of `(spec, index)`.
pub fn synth_windows(spec: &SynthSpec, range: Range<usize>) -> Result<Vec<MeasurementMatrix>> {
    spec.validate()?;
    let system = System::new(spec);
    range
        .map(|k| {
            let mut rng = window_rng(spec.seed, k);
            let values = match spec.mode {
                SynthMode::Steady => steady_window(spec, &system, &mut rng),
                SynthMode::Transient => transient_window(spec, &system, &mut rng),
            };
            MeasurementMatrix::new(default_channel_names(spec.channels), spec.len, values)
        })
        .collect()
}

pub fn synth_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<MeasurementMatrix>> {
    synth_windows(spec, 0..count)
}

fn noise(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> f64 {
    if spec.noise == 0.0 {
        0.0
    } else {
        spec.noise * rng.sample::<f64, _>(StandardNormal)
    }
}

fn steady_window(spec: &SynthSpec, sys: &System, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (m, t_len) = (spec.channels, spec.len);
    let start = rng.random_range(0.0..spec.week_period);
    let slope = rng.random_range(-1.0..1.0);
    let mut out = Vec::with_capacity(m * t_len);
    for ch in 0..m {
        for t in 0..t_len {
            let clock = start + t as f64;
            let day = 2.0 * PI * clock / spec.day_period;
            let week = 2.0 * PI * clock / spec.week_period;
            let sources = [
                day.sin(),
                (2.0 * day + 0.7).sin() * 0.5,
                (1.0 + 0.3 * week.sin()) * day.cos(),
                spec.ramp * slope * (2.0 * t as f64 / t_len as f64 - 1.0),
            ];
            let mix: f64 = sys.mixing[ch]
                .iter()
                .zip(&sources)
                .map(|(a, s)| a * s)
                .sum();
            out.push(sys.level[ch] + sys.gain[ch] * (mix + noise(spec, rng)));
        }
    }
    out
}

fn transient_window(spec: &SynthSpec, sys: &System, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (m, t_len) = (spec.channels, spec.len);
    let event = (spec.event_at * t_len as f64).round() as usize;
    let zeta = spec.damping;
    let omega = spec.frequency;
    let omega_d = omega * (1.0 - zeta * zeta).max(0.0).sqrt();
    let severity = rng.random_range(0.5..1.5);
    let shift = rng.random_range(-0.5..0.5);
    let mut out = Vec::with_capacity(m * t_len);
    for ch in 0..m {
        let amp = severity * sys.gain[ch] * sys.mixing[ch][0].abs().max(0.2);
        let phase = sys.phase[ch] + shift;
        for t in 0..t_len {
            let deviation = if t < event {
                0.0
            } else {
                let tau = (t - event) as f64;
                amp * (-zeta * omega * tau).exp() * (omega_d * tau + phase).sin()
            };
            out.push(sys.level[ch] + deviation + sys.gain[ch] * noise(spec, rng));
        }
    }
    out
}
