use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tsdm_tensor::{Tape, Tensor};

use super::net::{check_input, forward};
use super::{DenoiserConfig, DenoiserParams};
use crate::error::{Result, TsdmError};
use crate::schedule::VarianceSchedule;

/// Losses above this abort training as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Reshuffle the dataset every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 42,
            grad_clip: 1.0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.grad_clip > 0.0
            && self.grad_clip.is_finite();
        if self.epochs == 0 || self.batch_size == 0 || !positive {
            return Err(TsdmError::invalid(
                "epochs, batch size, learning rate and gradient clip must be positive",
            ));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &DenoiserParams) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut DenoiserParams, grads: &[Tensor], lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, p) in params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k].data()[j] * scale;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Forms `x_n = √ᾱ_n·x₀ + √(1−ᾱ_n)·ε`.
pub(crate) fn diffuse(
    sched: &VarianceSchedule,
    x0: &Tensor,
    n: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    let ab = sched.alpha_bar(n);
    Ok(x0.scale(ab.sqrt())?.add(&eps.scale((1.0 - ab).sqrt())?)?)
}

/// The simplified objective `mean((ε − ε_θ(x_n, n))²)` for one fixed draw.
/// `n = 0` is accepted as the noiseless anchor where `x_n = x₀`.
pub fn training_loss(
    cfg: &DenoiserConfig,
    params: &DenoiserParams,
    sched: &VarianceSchedule,
    x0: &Tensor,
    n: usize,
    eps: &Tensor,
) -> Result<f64> {
    let xn = diffuse(sched, x0, n, eps)?;
    let pred = super::predict_noise(cfg, params, &xn, n)?;
    let diff = eps.sub(&pred)?;
    Ok(diff.mul(&diff)?.mean()?.item()?)
}

/// Mean objective over a batch with explicit `(n, ε)` draws, and its
/// gradient with respect to every parameter tensor, in layout order.
pub fn batch_loss_gradients(
    cfg: &DenoiserConfig,
    params: &DenoiserParams,
    sched: &VarianceSchedule,
    batch: &[Tensor],
    draws: &[(usize, Tensor)],
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(TsdmError::invalid(
            "batch must be nonempty with one draw per item",
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut total = None;
    for (x0, (n, eps)) in batch.iter().zip(draws) {
        check_input(cfg, x0)?;
        let xn = tape.constant(diffuse(sched, x0, *n, eps)?);
        let target = tape.constant(eps.clone());
        let pred = forward(&mut tape, cfg, &bound, xn, *n)?;
        let item = tape.mse(pred, target)?;
        total = Some(match total {
            None => item,
            Some(acc) => tape.add(acc, item)?,
        });
    }
    let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(loss).item()?;
    let vars = bound.vars.clone();
    let mut grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|v| grads.take(*v).expect("parameter gradient"))
        .collect();
    Ok((loss_value, grads))
}

/// Single-writer optimizer state over a parameter set.
pub struct Trainer<'a> {
    config: DenoiserConfig,
    params: DenoiserParams,
    sched: &'a VarianceSchedule,
    tcfg: TrainConfig,
    adam: Adam,
    steps: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: DenoiserConfig,
        params: DenoiserParams,
        sched: &'a VarianceSchedule,
        tcfg: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        tcfg.validate()?;
        let adam = Adam::new(&params);
        Ok(Self {
            config,
            params,
            sched,
            tcfg,
            adam,
            steps: 0,
        })
    }

    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn into_params(self) -> DenoiserParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One Adam step on a batch of clean windows. Draws `n ~ U{1..N}` and
    /// `ε ~ N(0, I)` per item from `rng`, in item order.
    pub fn training_step(&mut self, batch: &[Tensor], rng: &mut impl Rng) -> Result<f64> {
        let draws = batch
            .iter()
            .map(|x0| {
                let n = rng.random_range(1..=self.sched.steps());
                let eps = Tensor::from_fn(x0.shape().to_vec(), |_| rng.sample(StandardNormal));
                (n, eps)
            })
            .collect::<Vec<_>>();
        self.step_with_draws(batch, &draws)
    }

    /// One Adam step with explicit `(n, ε)` per batch item.
    pub fn step_with_draws(&mut self, batch: &[Tensor], draws: &[(usize, Tensor)]) -> Result<f64> {
        let (loss_value, grads) =
            batch_loss_gradients(&self.config, &self.params, self.sched, batch, draws)?;
        if !loss_value.is_finite() || loss_value > DIVERGENCE_LOSS {
            return Err(TsdmError::Diverged {
                step: self.steps,
                loss: loss_value,
            });
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TsdmError::NonFinite { step: self.steps });
        }
        let scale = if norm > self.tcfg.grad_clip {
            self.tcfg.grad_clip / norm
        } else {
            1.0
        };
        self.adam
            .update(&mut self.params, &grads, self.tcfg.learning_rate, scale);
        self.steps += 1;
        Ok(loss_value)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: DenoiserParams,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Offset between the training seed and the weight-initialization seed.
const INIT_SEED_SALT: u64 = 0x5EED_1417;

/// Trains from fresh weights on normalized `M×T` windows. Reproducible
/// given `tcfg.seed`.
pub fn train(
    dataset: &[Tensor],
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
    sched: &VarianceSchedule,
) -> Result<TrainReport> {
    train_with_progress(dataset, dcfg, tcfg, sched, |_, _| {})
}

/// [`train`] with a callback after every epoch receiving `(epoch, loss)`.
pub fn train_with_progress(
    dataset: &[Tensor],
    dcfg: &DenoiserConfig,
    tcfg: &TrainConfig,
    sched: &VarianceSchedule,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(TsdmError::invalid("training dataset is empty"));
    }
    for x in dataset {
        check_input(dcfg, x)?;
    }
    let params = DenoiserParams::init(dcfg, tcfg.seed ^ INIT_SEED_SALT)?;
    let mut trainer = Trainer::new(dcfg.clone(), params, sched, tcfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..tcfg.epochs {
        if tcfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let loss = trainer.training_step(&batch, &mut rng)?;
            step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        let mean = sum / count as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        params: trainer.into_params(),
        epoch_losses,
        step_losses,
    })
}
