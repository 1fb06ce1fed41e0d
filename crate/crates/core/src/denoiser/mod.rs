//! Noise-prediction network `ε_θ(x_n, n)`: a small 1-D U-Net with residual
//! blocks, a bottleneck self-attention block and a sinusoidal step embedding.

mod checkpoint;
mod net;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use tsdm_tensor::Tensor;

use crate::error::{Result, TsdmError};
use crate::matrix::MeasurementMatrix;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{predict_noise, time_embed};
pub use params::DenoiserParams;
pub use train::{
    batch_loss_gradients, train, train_with_progress, training_loss, TrainConfig, TrainReport,
    Trainer, DIVERGENCE_LOSS,
};

/// Anything that predicts the forward-process noise of a latent. Samplers
/// are written against this trait so analytic predictors can stand in for
/// the trained network in tests.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &Tensor, n: usize) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Measurement channels `M`.
    pub channels_in: usize,
    /// Hidden width of the first stage; stage `d` uses `base_width·2^d`.
    pub base_width: usize,
    /// Number of down/up-sampling stages.
    pub depth: usize,
    /// Width of the sinusoidal step embedding (even).
    pub time_embed_dim: usize,
    /// Convolution kernel width (odd).
    pub kernel: usize,
    /// Group-norm groups; must divide every hidden width.
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels_in: 8,
            base_width: 16,
            depth: 2,
            time_embed_dim: 32,
            kernel: 3,
            groups: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TsdmError::invalid(msg));
        if self.channels_in == 0 || self.base_width == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel width must be odd, got {}", self.kernel));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return fail(format!(
                "time embedding width must be even and positive, got {}",
                self.time_embed_dim
            ));
        }
        for w in self.hidden_widths() {
            if self.groups == 0 || w % self.groups != 0 {
                return fail(format!("{} groups do not divide width {w}", self.groups));
            }
        }
        Ok(())
    }

    /// Every window length must survive `depth` halvings.
    pub fn check_window(&self, len: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if len == 0 || !len.is_multiple_of(unit) {
            return Err(TsdmError::invalid(format!(
                "window length {len} is not divisible by 2^depth = {unit}"
            )));
        }
        Ok(())
    }

    pub(crate) fn stage_width(&self, d: usize) -> usize {
        self.base_width << d
    }

    pub(crate) fn time_hidden(&self) -> usize {
        2 * self.time_embed_dim
    }

    /// Widths seen by group norms, including decoder concatenations.
    fn hidden_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = (0..self.depth).map(|d| self.stage_width(d)).collect();
        for d in 0..self.depth {
            let below = if d + 1 == self.depth {
                self.stage_width(d)
            } else {
                self.stage_width(d + 1)
            };
            widths.push(below + self.stage_width(d));
        }
        widths
    }
}

/// Per-channel z-score statistics of the training windows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose spread falls below this are treated as unit-scale.
const MIN_STD: f64 = 1e-8;

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits per-channel mean and standard deviation over all observed
    /// entries of all windows.
    pub fn fit(windows: &[MeasurementMatrix]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| TsdmError::invalid("cannot fit normalization on an empty dataset"))?;
        let m = first.rows();
        let mut sum = vec![0.0; m];
        let mut count = vec![0usize; m];
        for w in windows {
            if w.rows() != m {
                return Err(TsdmError::invalid("windows have differing channel counts"));
            }
            for ch in 0..m {
                for &v in w.row(ch).iter().filter(|v| !v.is_nan()) {
                    sum[ch] += v;
                    count[ch] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; m];
        for w in windows {
            for ch in 0..m {
                for &v in w.row(ch).iter().filter(|v| !v.is_nan()) {
                    sq[ch] += (v - mean[ch]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &c)| {
                let sd = if c > 0 { (s / c as f64).sqrt() } else { 0.0 };
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Z-scores a window; `NaN` entries stay `NaN`.
    pub fn normalize(&self, x: &MeasurementMatrix) -> Result<Tensor> {
        self.check(x.rows())?;
        let cols = x.cols();
        let data = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i / cols]) / self.std[i / cols])
            .collect();
        Ok(Tensor::new([x.rows(), cols], data)?)
    }

    pub fn denormalize(&self, z: &Tensor, channels: Vec<String>) -> Result<MeasurementMatrix> {
        let (rows, cols) = z.dims2("denormalize")?;
        self.check(rows)?;
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i / cols] + self.mean[i / cols])
            .collect();
        MeasurementMatrix::new(channels, cols, data)
    }

    fn check(&self, rows: usize) -> Result<()> {
        if rows != self.channels() {
            return Err(TsdmError::invalid(format!(
                "window has {rows} channels, normalization expects {}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// A trained network together with the normalization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: DenoiserParams,
    pub norm: NormStats,
}

impl Denoiser {
    /// Freshly initialized network (zero output head) with identity normalization.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(&config, seed)?;
        let norm = NormStats::identity(config.channels_in);
        Ok(Self {
            config,
            params,
            norm,
        })
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        predict_noise(&self.config, &self.params, x, n)
    }
}
