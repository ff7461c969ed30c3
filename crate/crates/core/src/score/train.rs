use alloc::vec;
use alloc::vec::Vec;


use super::{DsmBatch, Mlp, Weighting};
use crate::math::{powi, sqrt};
use crate::error::{contract, Error, Result};
use crate::rng::{stream, StreamRng};
use crate::sde::NonUniformSde;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the network output maps to the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Preconditioning {
    /// The output is the score.
    #[default]
    None,
    /// The input is `x_t / sqrt(m^2 + s^2)` and the output is
    /// `s(t) * score`; wrap the trained net in
    /// [`KernelScaled`](super::KernelScaled) for inference.
    InverseKernelStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub iterations: usize,
    pub ema_rate: f64,
    pub seed: u64,
    pub weighting: Weighting,
    pub preconditioning: Preconditioning,
    /// Learning rate multiplier decays linearly to this value at the end.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            batch_size: 128,
            iterations: 1000,
            ema_rate: 0.999,
            seed: 0,
            weighting: Weighting::LikelihoodMatrix,
            preconditioning: Preconditioning::None,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = match self.optimizer {
            Optimizer::Sgd { lr } => lr,
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(contract("Adam betas must lie in [0, 1) and eps must be positive"));
                }
                lr
            }
        };
        if !(lr > 0.0) {
            return Err(contract("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be positive"));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(contract("EMA rate must lie in (0, 1)"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(contract("final learning-rate fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Supplies clean training samples.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn sample(&mut self, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>>;
}

/// Supplies DSM batches to [`train`].
pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> Result<DsmBatch>;
}

/// Unconditional DSM over `[t_lo, t_hi]` for a sample source.
pub struct UnconditionalSource<S> {
    pub sde: NonUniformSde,
    pub data: S,
    pub weighting: Weighting,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl<S: SampleSource> UnconditionalSource<S> {
    pub fn new(sde: NonUniformSde, data: S, weighting: Weighting) -> Self {
        let (t_lo, t_hi) = (sde.epsilon(), sde.horizon());
        Self {
            sde,
            data,
            weighting,
            t_lo,
            t_hi,
        }
    }
}

impl<S: SampleSource> BatchSource for UnconditionalSource<S> {
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> Result<DsmBatch> {
        let x0 = self.data.sample(batch_size, rng)?;
        DsmBatch::sample(&self.sde, &x0, &[], 0, self.weighting, self.t_lo, self.t_hi, rng)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub ema: Mlp,
    /// Batch loss before each update.
    pub trace: Vec<f64>,
}

/// Minimises the DSM objective supplied by `source` with the configured
/// optimizer, keeping an exponential moving average of the weights.
pub fn train(model: Mlp, source: &mut dyn BatchSource, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = stream(config.seed, 0);
    let mut model = model;
    let mut ema = model.clone();
    let n = model.num_params();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut trace = Vec::with_capacity(config.iterations);
    let scaled = config.preconditioning == Preconditioning::InverseKernelStd;
    for it in 0..config.iterations {
        let batch = source.next_batch(config.batch_size, &mut rng)?;
        let (loss, grads) = batch
            .loss_and_grad(&model, scaled)
            .map_err(|_| Error::Diverged { iteration: it })?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        trace.push(loss);
        let progress = it as f64 / config.iterations.max(1) as f64;
        let lr_scale = 1.0 - (1.0 - config.final_lr_fraction) * progress;
        let params = model.params_mut();
        match config.optimizer {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    *p -= lr * lr_scale * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let step = (it + 1) as i32;
                let c1 = 1.0 - powi(beta1, step);
                let c2 = 1.0 - powi(beta2, step);
                for i in 0..n {
                    let g = grads[i];
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
                    let mhat = m1[i] / c1;
                    let vhat = m2[i] / c2;
                    params[i] -= lr * lr_scale * mhat / (sqrt(vhat) + eps);
                }
            }
        }
        let rate = config.ema_rate;
        for (e, p) in ema.params_mut().iter_mut().zip(model.params()) {
            *e = rate * *e + (1.0 - rate) * p;
        }
    }
    Ok(TrainOutcome { model, ema, trace })
}

/// Unconditional training over the SDE's full time range.
pub fn train_unconditional<S: SampleSource>(
    model: Mlp,
    sde: &NonUniformSde,
    data: S,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut source = UnconditionalSource::new(sde.clone(), data, config.weighting);
    train(model, &mut source, config)
}
