use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Mlp, ScoreModel};
use crate::error::{check_len, contract, Error, Result};
use crate::rng;
use crate::sde::NonUniformSde;

/// Choice of the weighting matrix `Lambda(t)` in the DSM objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Weighting {
    /// `Lambda(t) = G(t) G(t)^T`.
    #[default]
    LikelihoodMatrix,
    Identity,
}

/// Kernel std below which the kernel score is considered undefined.
const STD_FLOOR: f64 = 1e-12;

/// One Monte Carlo draw of the denoising score matching objective:
/// perturbed states, their times, the kernel-score targets and the diagonal
/// of `Lambda(t)` for every row.
///
/// Keeping the draw separate from the evaluation lets several models be
/// compared on the same randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmBatch {
    pub dim: usize,
    pub cond_dim: usize,
    pub xt: Vec<f64>,
    pub cond: Vec<f64>,
    pub t: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    pub kernel_mean: Vec<f64>,
    pub kernel_std: Vec<f64>,
}

impl DsmBatch {
    /// Draws `t ~ U(t_lo, t_hi)` and `x_t ~ p(x_t | x_0)` for each row of
    /// `x0`. `cond` rows are carried through untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<R: Rng + ?Sized>(
        sde: &NonUniformSde,
        x0: &[f64],
        cond: &[f64],
        cond_dim: usize,
        weighting: Weighting,
        t_lo: f64,
        t_hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = sde.dim();
        if !x0.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                what: "DSM batch rows",
                expected: d,
                found: x0.len() % d,
            });
        }
        let n = x0.len() / d;
        check_len("DSM condition rows", n * cond_dim, cond.len())?;
        if !(t_lo < t_hi) {
            return Err(contract("DSM time range must be non-empty"));
        }
        let t: Vec<f64> = (0..n).map(|_| rng::uniform(rng, t_lo, t_hi)).collect();
        Self::sample_at(sde, x0, cond, cond_dim, weighting, &t, rng)
    }

    /// As [`sample`](Self::sample) with given per-row times.
    pub fn sample_at<R: Rng + ?Sized>(
        sde: &NonUniformSde,
        x0: &[f64],
        cond: &[f64],
        cond_dim: usize,
        weighting: Weighting,
        t: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        let d = sde.dim();
        let n = t.len();
        check_len("DSM batch rows", n * d, x0.len())?;
        check_len("DSM condition rows", n * cond_dim, cond.len())?;
        let mut xt = vec![0.0; n * d];
        let mut target = vec![0.0; n * d];
        let mut weight = vec![0.0; n * d];
        let mut kernel_mean = vec![0.0; n * d];
        let mut kernel_std = vec![0.0; n * d];
        for r in 0..n {
            let (m, s) = sde.kernel_vectors(t[r])?;
            if s.iter().any(|&v| v < STD_FLOOR) {
                return Err(contract(
                    "kernel std below numeric floor; sampled time too close to epsilon",
                ));
            }
            let w = match weighting {
                Weighting::LikelihoodMatrix => sde.likelihood_weights(t[r])?,
                Weighting::Identity => vec![1.0; d],
            };
            for i in 0..d {
                let k = r * d + i;
                let mean = m[i] * x0[k];
                xt[k] = mean + s[i] * rng::normal(rng);
                target[k] = -(xt[k] - mean) / (s[i] * s[i]);
                weight[k] = w[i];
                kernel_mean[k] = m[i];
                kernel_std[k] = s[i];
            }
        }
        Ok(Self {
            dim: d,
            cond_dim,
            xt,
            cond: cond.to_vec(),
            t: t.to_vec(),
            target,
            weight,
            kernel_mean,
            kernel_std,
        })
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    /// `1/2 mean_r v_r^T Lambda v_r` given model outputs for every row.
    pub fn loss_from_scores(&self, scores: &[f64]) -> Result<f64> {
        check_len("DSM model output", self.target.len(), scores.len())?;
        let n = self.rows().max(1) as f64;
        let total: f64 = self
            .target
            .iter()
            .zip(scores)
            .zip(&self.weight)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum();
        let loss = 0.5 * total / n;
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFinite {
                what: "DSM loss",
                step: 0,
            })
        }
    }

    pub fn loss(&self, model: &dyn ScoreModel) -> Result<f64> {
        check_len("DSM model dimension", self.dim, model.dim())?;
        check_len("DSM model condition dimension", self.cond_dim, model.cond_dim())?;
        let mut scores = vec![0.0; self.target.len()];
        model.score_batch(&self.xt, &self.cond, &self.t, &mut scores)?;
        self.loss_from_scores(&scores)
    }

    /// Loss and parameter gradient for a network. With `kernel_scaled` the
    /// network sees `x_t / sqrt(m^2 + s^2)` and its output is read as
    /// `s(t) * score`, as in [`KernelScaled`](super::KernelScaled); the loss
    /// value is that of the wrapped model.
    pub fn loss_and_grad(&self, mlp: &Mlp, kernel_scaled: bool) -> Result<(f64, Vec<f64>)> {
        check_len("DSM model dimension", self.dim, mlp.dim())?;
        let tape = if kernel_scaled {
            let xin: Vec<f64> = self
                .xt
                .iter()
                .zip(self.kernel_mean.iter().zip(&self.kernel_std))
                .map(|(x, (m, s))| x * super::mlp::input_scale(*m, *s))
                .collect();
            mlp.forward_tape(&xin, &self.cond, &self.t)?
        } else {
            mlp.forward_tape(&self.xt, &self.cond, &self.t)?
        };
        let out = tape.output();
        let n = self.rows().max(1) as f64;
        let mut grad_out = vec![0.0; out.len()];
        let mut total = 0.0;
        for k in 0..out.len() {
            let (target, w) = if kernel_scaled {
                let s = self.kernel_std[k];
                (self.target[k] * s, self.weight[k] / (s * s))
            } else {
                (self.target[k], self.weight[k])
            };
            let diff = target - out[k];
            total += w * diff * diff;
            grad_out[k] = -w * diff / n;
        }
        let loss = 0.5 * total / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "DSM loss",
                step: 0,
            });
        }
        let grads = mlp.backward(&tape, &grad_out)?;
        Ok((loss, grads))
    }
}

/// Weighted DSM objective of `model` on a fresh draw over `[eps, horizon]`.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    sde: &NonUniformSde,
    x0: &[f64],
    weighting: Weighting,
    rng: &mut R,
) -> Result<f64> {
    let batch = DsmBatch::sample(sde, x0, &[], 0, weighting, sde.epsilon(), sde.horizon(), rng)?;
    batch.loss(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::score::{Activation, AnalyticGaussian, KernelScaled};
    use crate::sde::SdeSpec;

    struct KernelOracle<'a>(&'a DsmBatch);
    impl ScoreModel for KernelOracle<'_> {
        fn dim(&self) -> usize {
            self.0.dim
        }
        fn score_batch(&self, _x: &[f64], _c: &[f64], _t: &[f64], out: &mut [f64]) -> Result<()> {
            out.copy_from_slice(&self.0.target);
            Ok(())
        }
    }

    #[test]
    fn exact_kernel_score_gives_zero_loss() {
        let sde = NonUniformSde::uniform(3, SdeSpec::ve(0.01, 50.0).unwrap()).unwrap();
        let mut rng = stream(1, 0);
        let x0: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let b = DsmBatch::sample(&sde, &x0, &[], 0, Weighting::LikelihoodMatrix, 0.01, 1.0, &mut rng).unwrap();
        assert_eq!(b.loss(&KernelOracle(&b)).unwrap(), 0.0);
    }

    #[test]
    fn likelihood_matrix_reduces_to_scalar_weighting_for_uniform_sde() {
        let spec = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
        let sde = NonUniformSde::uniform(2, spec).unwrap();
        let mut rng = stream(2, 0);
        let x0 = [0.5, -0.5, 1.0, 0.2, -0.3, 0.9];
        let b = DsmBatch::sample(&sde, &x0, &[], 0, Weighting::LikelihoodMatrix, 0.01, 1.0, &mut rng).unwrap();
        let zero = crate::score::Mlp::zeros(2, 0, &[], Activation::Identity).unwrap();
        let matrix = b.loss(&zero).unwrap();
        // Scalar path: lambda(t) = g(t)^2 times the squared norm.
        let mut scalar = 0.0;
        for r in 0..3 {
            let g = spec.diffusion(b.t[r]).unwrap();
            let norm: f64 = b.target[2 * r..2 * r + 2].iter().map(|v| v * v).sum();
            scalar += g * g * norm;
        }
        scalar *= 0.5 / 3.0;
        // Same terms, different summation order.
        assert!((matrix - scalar).abs() <= 1e-14 * scalar);
    }

    #[test]
    fn kernel_scaled_gradient_matches_loss_value() {
        let spec = SdeSpec::ve(0.1, 10.0).unwrap();
        let sde = NonUniformSde::uniform(1, spec).unwrap();
        let mut rng = stream(4, 0);
        let mlp = crate::score::Mlp::init(1, 0, &[8], Activation::Silu, &mut rng).unwrap();
        let x0 = [0.3, -1.2, 0.8, 0.1];
        let b = DsmBatch::sample(&sde, &x0, &[], 0, Weighting::LikelihoodMatrix, 0.05, 1.0, &mut rng).unwrap();
        let (loss, _) = b.loss_and_grad(&mlp, true).unwrap();
        let scaled = KernelScaled::new(mlp, sde).unwrap();
        let direct = b.loss(&scaled).unwrap();
        assert!((loss - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn analytic_model_has_lower_expected_loss_than_perturbed_one() {
        // Common random numbers: the same draw scores both models.
        let spec = SdeSpec::ve(0.1, 10.0).unwrap();
        let sde = NonUniformSde::uniform(1, spec).unwrap();
        let exact = AnalyticGaussian::new(vec![0.0], vec![1.0], sde.clone()).unwrap();
        let shifted = AnalyticGaussian::new(vec![0.3], vec![1.0], sde.clone()).unwrap();
        let mut rng = stream(9, 0);
        let x0: Vec<f64> = (0..100_000).map(|_| rng::normal(&mut rng)).collect();
        let b = DsmBatch::sample(&sde, &x0, &[], 0, Weighting::LikelihoodMatrix, 0.05, 1.0, &mut rng).unwrap();
        assert!(b.loss(&exact).unwrap() < b.loss(&shifted).unwrap());
    }
}
