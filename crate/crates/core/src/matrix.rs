//! Measurement windows and the binary masks that travel with them.

use tsdm_tensor::Tensor;

use crate::error::{Result, TsdmError};

/// An `M×T` grid of channel readings. Missing readings are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    channels: Vec<String>,
    cols: usize,
    values: Vec<f64>,
}

impl MeasurementMatrix {
    pub fn new(channels: Vec<String>, cols: usize, values: Vec<f64>) -> Result<Self> {
        if channels.is_empty() || cols == 0 || channels.len() * cols != values.len() {
            return Err(TsdmError::invalid(format!(
                "{} channels × {cols} samples does not match {} values",
                channels.len(),
                values.len()
            )));
        }
        Ok(Self {
            channels,
            cols,
            values,
        })
    }

    /// Matrix with generated channel names `ch0..ch{M-1}`.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(default_channel_names(rows), cols, values)
    }

    pub fn from_tensor(t: &Tensor, channels: Vec<String>) -> Result<Self> {
        let (_, cols) = t.dims2("measurement matrix")?;
        Self::new(channels, cols, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.rows(), self.cols], self.values.clone()).expect("validated dimensions")
    }

    pub fn rows(&self) -> usize {
        self.channels.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols)
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, m: usize, t: usize) -> f64 {
        self.values[m * self.cols + t]
    }

    pub fn set(&mut self, m: usize, t: usize, v: f64) {
        self.values[m * self.cols + t] = v;
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }

    pub fn row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.values[m * self.cols..(m + 1) * self.cols]
    }

    /// Entries that hold a reading (not `NaN`).
    pub fn observed(&self) -> ObservabilityMask {
        ObservabilityMask::from_fn(self.rows(), self.cols, |m, t| !self.get(m, t).is_nan())
    }

    pub(crate) fn check_same_shape(&self, other: &MeasurementMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TsdmError::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

pub fn default_channel_names(rows: usize) -> Vec<String> {
    (0..rows).map(|m| format!("ch{m}")).collect()
}

/// Sample standard deviation over a slice (population form, divides by n).
pub(crate) fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

macro_rules! bit_grid {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq, Eq, Hash)]
        pub struct $name {
            rows: usize,
            cols: usize,
            bits: Vec<bool>,
        }

        impl $name {
            pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
                if rows * cols != bits.len() || rows == 0 || cols == 0 {
                    return Err(TsdmError::invalid(format!(
                        "{rows}×{cols} mask does not match {} entries",
                        bits.len()
                    )));
                }
                Ok(Self { rows, cols, bits })
            }

            pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
                Self { rows, cols, bits: vec![value; rows * cols] }
            }

            pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
                let bits = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
                Self { rows, cols, bits }
            }

            /// Builds a mask from 0/1 values; anything else is rejected.
            pub fn from_values(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
                let bits = values
                    .iter()
                    .map(|&v| match v {
                        v if v == 1.0 => Ok(true),
                        v if v == 0.0 => Ok(false),
                        v => Err(TsdmError::invalid(format!("mask value {v} is not binary"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(rows, cols, bits)
            }

            pub fn rows(&self) -> usize {
                self.rows
            }

            pub fn cols(&self) -> usize {
                self.cols
            }

            pub fn shape(&self) -> (usize, usize) {
                (self.rows, self.cols)
            }

            pub fn get(&self, m: usize, t: usize) -> bool {
                self.bits[m * self.cols + t]
            }

            pub fn set(&mut self, m: usize, t: usize, v: bool) {
                self.bits[m * self.cols + t] = v;
            }

            pub fn bits(&self) -> &[bool] {
                &self.bits
            }

            pub fn count_set(&self) -> usize {
                self.bits.iter().filter(|&&b| b).count()
            }

            /// Fraction of entries that are set.
            pub fn fraction_set(&self) -> f64 {
                self.count_set() as f64 / self.bits.len() as f64
            }

            pub fn to_values(&self) -> Vec<f64> {
                self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
            }
        }
    };
}

bit_grid!(
    /// Binary `M×T` grid: `true` marks a trusted, observed entry; `false` an
    /// entry that is missing or flagged and must be imputed.
    ObservabilityMask
);

bit_grid!(
    /// Binary `M×T` grid where `true` marks a corrupted or flagged entry.
    FlagMap
);

impl ObservabilityMask {
    /// Entries that are not trusted.
    pub fn flags(&self) -> FlagMap {
        FlagMap {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Entries trusted by both masks.
    pub fn intersect(&self, other: &ObservabilityMask) -> Result<ObservabilityMask> {
        if self.shape() != other.shape() {
            return Err(TsdmError::invalid("mask shapes differ"));
        }
        Ok(ObservabilityMask {
            rows: self.rows,
            cols: self.cols,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|b| !**b).count() as f64 / self.bits.len() as f64
    }
}

impl FlagMap {
    /// Complement: flagged entries become untrusted.
    pub fn to_observability(&self) -> ObservabilityMask {
        ObservabilityMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}
