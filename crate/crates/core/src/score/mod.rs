//! Score-function approximators and the weighted denoising score matching
//! objective.

mod analytic;
mod dsm;
mod mlp;
mod train;

pub use analytic::{AnalyticGaussian, AnalyticGmm, GmmComponent};
pub use dsm::{dsm_loss, DsmBatch, Weighting};
pub use mlp::{time_embedding, Activation, ForwardTape, KernelScaled, Mlp, TIME_EMBED_DIM};
pub use train::{
    train, train_unconditional, BatchSource, Optimizer, Preconditioning, SampleSource,
    TrainConfig, TrainOutcome, UnconditionalSource,
};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;

/// A time-dependent score `s(x, t)` (optionally `s(x, y, t)`), evaluated on
/// row-major batches.
///
/// `x` holds `n` rows of [`dim`](Self::dim) values, `cond` holds `n` rows of
/// [`cond_dim`](Self::cond_dim) values (empty when unconditional) and `t`
/// holds one time per row.
pub trait ScoreModel {
    fn dim(&self) -> usize;

    fn cond_dim(&self) -> usize {
        0
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()>;
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).score_batch(x, cond, t, out)
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for alloc::boxed::Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).score_batch(x, cond, t, out)
    }
}

/// Score at a single point.
pub fn score_at(model: &dyn ScoreModel, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    model.score_batch(x, &[], &[t], &mut out)?;
    Ok(out)
}

/// Exact diffused score of an analytic model at a single point.
pub fn analytic_score(model: &dyn ScoreModel, x: &[f64], t: f64) -> Result<Vec<f64>> {
    score_at(model, x, t)
}

pub(crate) fn check_batch(
    model: &dyn ScoreModel,
    x: &[f64],
    cond: &[f64],
    t: &[f64],
    out: &[f64],
) -> Result<usize> {
    use crate::error::check_len;
    let n = t.len();
    check_len("score input rows", n * model.dim(), x.len())?;
    check_len("score condition rows", n * model.cond_dim(), cond.len())?;
    check_len("score output", x.len(), out.len())?;
    Ok(n)
}
