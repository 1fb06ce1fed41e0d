//! Two-stage diffusion recovery of multichannel measurement windows.

pub mod baseline;
pub mod bench;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod impute;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod threat;

pub use error::{Result, Stage, TsdmError};
