//! Wall-clock cost of accelerated sampling.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Shape;
use crate::denoiser::NoisePredictor;
use crate::error::{Result, TsdmError};
use crate::sampler::unconditional_sample;
use crate::schedule::{Subsequence, VarianceSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub shape: Shape,
    pub s: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// `mean_ms` over the mean at `s = N` for the same shape.
    pub ratio: f64,
}

/// Times `repeats` full reverse passes per `(shape, s)`. `s = N` is always
/// measured so each row carries its ratio to the unaccelerated sampler.
/// One untimed pass per shape warms caches first.
pub fn bench_timing(
    model: &impl NoisePredictor,
    sched: &VarianceSchedule,
    shapes: &[Shape],
    s_values: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 || shapes.is_empty() || s_values.is_empty() {
        return Err(TsdmError::invalid(
            "bench needs shapes, s values and at least one repeat",
        ));
    }
    let n = sched.steps();
    let mut s_all: Vec<usize> = s_values.to_vec();
    if !s_all.contains(&n) {
        s_all.push(n);
    }
    let mut rows = Vec::new();
    for &shape in shapes {
        let dims = (shape.rows, shape.cols);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unconditional_sample(model, dims, sched, &Subsequence::uniform(n, 1)?, &mut rng)?;
        let mut stats = Vec::new();
        for &s in &s_all {
            let tau = Subsequence::uniform(n, s)?;
            let times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    unconditional_sample(model, dims, sched, &tau, &mut rng)?;
                    Ok(start.elapsed().as_secs_f64() * 1e3)
                })
                .collect::<Result<_>>()?;
            let mean = times.iter().sum::<f64>() / repeats as f64;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64;
            stats.push((s, mean, var.sqrt()));
        }
        let full = stats
            .iter()
            .find(|(s, ..)| *s == n)
            .map(|(_, m, _)| *m)
            .unwrap_or(f64::NAN);
        for (s, mean_ms, std_ms) in stats {
            if s_values.contains(&s) {
                rows.push(BenchRow {
                    shape,
                    s,
                    mean_ms,
                    std_ms,
                    ratio: if s == n { 1.0 } else { mean_ms / full },
                });
            }
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("shape,s,mean_ms,std_ms,ratio_vs_full\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.shape, r.s, r.mean_ms, r.std_ms, r.ratio
        ));
    }
    out
}
