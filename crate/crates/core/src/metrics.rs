//! Reconstruction and distributional metrics, and the likelihood-weighting
//! KL bound check on a 1D Gaussian.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{ln, log10, powi, sqrt};
use crate::error::{check_len, contract, Result};
use crate::rng;
use crate::score::ScoreModel;
use crate::sde::SdeSpec;

/// `10 log10(peak^2 / mse)`, or `+inf` when the inputs are identical.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    check_len("PSNR input", a.len(), b.len())?;
    if a.is_empty() {
        return Err(contract("PSNR of empty inputs"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * log10(peak * peak / mse))
}

/// Per-pixel population standard deviation across `k >= 2`
/// reconstructions, averaged over pixels.
pub fn diversity(reconstructions: &[&[f64]]) -> Result<f64> {
    let k = reconstructions.len();
    if k < 2 {
        return Err(contract("diversity needs at least two reconstructions"));
    }
    let n = reconstructions[0].len();
    for r in reconstructions {
        check_len("reconstruction", n, r.len())?;
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        let mean = reconstructions.iter().map(|r| r[i]).sum::<f64>() / k as f64;
        let var = reconstructions
            .iter()
            .map(|r| (r[i] - mean) * (r[i] - mean))
            .sum::<f64>()
            / k as f64;
        total += sqrt(var);
    }
    Ok(total / n as f64)
}

/// Exact 2-Wasserstein distance between two empirical 1D distributions
/// with uniform weights, by merging their quantile functions.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("Wasserstein distance of an empty sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut q = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        let d = a[i] - b[j];
        acc += (next - q) * d * d;
        q = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(sqrt(acc.max(0.0)))
}

/// Mean over `n_projections` random unit directions of the 1D
/// 2-Wasserstein distance between the projected samples.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &[f64],
    b: &[f64],
    dim: usize,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(contract("sample sets must be rows of the given dimension"));
    }
    if a.len() / dim < 2 || b.len() / dim < 2 {
        return Err(contract("sliced Wasserstein needs at least two samples per set"));
    }
    if n_projections == 0 {
        return Err(contract("need at least one projection"));
    }
    let mut dir = vec![0.0; dim];
    let mut total = 0.0;
    for _ in 0..n_projections {
        loop {
            rng::fill_normal(rng, &mut dir);
            let norm = sqrt(dir.iter().map(|v| v * v).sum::<f64>());
            if norm > 1e-12 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        let project = |rows: &[f64]| -> Vec<f64> {
            rows.chunks(dim)
                .map(|r| r.iter().zip(&dir).map(|(x, u)| x * u).sum())
                .collect()
        };
        total += wasserstein2_1d(&project(a), &project(b))?;
    }
    Ok(total / n_projections as f64)
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub psnr: Option<f64>,
    pub consistency_psnr: Option<f64>,
    pub diversity: Option<f64>,
    pub swd: Option<f64>,
    pub kl_bound_pair: Option<(f64, f64)>,
}

/// Scalar Gaussian target `N(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian1d {
    pub mean: f64,
    pub var: f64,
}

/// Exact diffused score of a [`Gaussian1d`] plus `slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedGaussianScore {
    pub target: Gaussian1d,
    pub sde: SdeSpec,
    pub slope: f64,
}

impl PerturbedGaussianScore {
    /// `(a, b)` with score `a x + b` at `t`.
    pub fn affine(&self, t: f64) -> Result<(f64, f64)> {
        let k = self.sde.kernel(t)?;
        let v = k.mean_scale * k.mean_scale * self.target.var + k.var();
        Ok((-1.0 / v + self.slope, k.mean_scale * self.target.mean / v))
    }
}

impl ScoreModel for PerturbedGaussianScore {
    fn dim(&self) -> usize {
        1
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        crate::score::check_batch(self, x, cond, t, out)?;
        for i in 0..x.len() {
            let (a, b) = self.affine(t[i])?;
            out[i] = a * x[i] + b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KlBound {
    /// `KL(p_eps || model law at eps)`.
    pub lhs: f64,
    /// `sm_term + prior_kl`.
    pub rhs: f64,
    /// Likelihood-weighted score matching objective.
    pub sm_term: f64,
    /// `KL(p_T || prior)`.
    pub prior_kl: f64,
}

impl KlBound {
    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.rhs + tol
    }
}

fn kl_gauss(m0: f64, v0: f64, m1: f64, v1: f64) -> f64 {
    0.5 * (ln(v1 / v0) + (v0 + (m0 - m1) * (m0 - m1)) / v1 - 1.0)
}

/// Checks `KL(p_eps || p_model) <= L_SM(g^2) + KL(p_T || prior)` for an
/// affine score model on a scalar Gaussian target.
///
/// The model's reverse SDE is linear, so its law stays Gaussian; its mean
/// and variance are integrated backward from the prior with RK4 over
/// `ode_steps` steps. The score matching term is a Monte Carlo average over
/// `n_mc` draws of `t ~ U(eps, T)` and `x_t` from the diffused target.
pub fn kl_bound_check<R: Rng + ?Sized>(
    model: &PerturbedGaussianScore,
    n_mc: usize,
    ode_steps: usize,
    rng: &mut R,
) -> Result<KlBound> {
    let target = model.target;
    if !(target.var > 0.0 && target.var.is_finite() && target.mean.is_finite()) {
        return Err(contract("KL bound check needs a non-degenerate Gaussian target"));
    }
    if n_mc == 0 || ode_steps == 0 {
        return Err(contract("need n_mc >= 1 and ode_steps >= 1"));
    }
    let sde = &model.sde;
    let (eps, horizon) = (sde.epsilon(), sde.terminal_time());
    let diffused = |t: f64| -> Result<(f64, f64)> {
        let k = sde.kernel(t)?;
        Ok((
            k.mean_scale * target.mean,
            k.mean_scale * k.mean_scale * target.var + k.var(),
        ))
    };

    let prior_var = powi(sde.prior_std(), 2);
    let (mt, vt) = diffused(horizon)?;
    let prior_kl = kl_gauss(mt, vt, 0.0, prior_var);

    // Backward moment ODEs of dx = (f x - g^2 (a x + b)) dt + g dw_bar:
    // d mu/dt = A mu + B, dP/dt = 2 A P - g^2 with A = f - g^2 a, B = -g^2 b.
    let rhs = |t: f64, mu: f64, p: f64| -> Result<(f64, f64)> {
        let f = sde.drift_coef(t)?;
        let g2 = powi(sde.diffusion(t)?, 2);
        let (a, b) = model.affine(t)?;
        let big_a = f - g2 * a;
        Ok((big_a * mu - g2 * b, 2.0 * big_a * p - g2))
    };
    let h = (eps - horizon) / ode_steps as f64;
    let (mut mu, mut p) = (0.0, prior_var);
    for k in 0..ode_steps {
        let t = horizon + k as f64 * h;
        let (k1m, k1p) = rhs(t, mu, p)?;
        let (k2m, k2p) = rhs(t + 0.5 * h, mu + 0.5 * h * k1m, p + 0.5 * h * k1p)?;
        let (k3m, k3p) = rhs(t + 0.5 * h, mu + 0.5 * h * k2m, p + 0.5 * h * k2p)?;
        let t_next = if k + 1 == ode_steps { eps } else { t + h };
        let (k4m, k4p) = rhs(t_next, mu + h * k3m, p + h * k3p)?;
        mu += h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    }
    if !(p > 0.0 && p.is_finite() && mu.is_finite()) {
        return Err(contract("model terminal law is degenerate"));
    }
    let (m0, v0) = diffused(eps)?;
    let lhs = kl_gauss(m0, v0, mu, p);

    let mut acc = 0.0;
    for _ in 0..n_mc {
        let t = rng::uniform(rng, eps, horizon);
        let (m, v) = diffused(t)?;
        let x = m + sqrt(v) * rng::normal(rng);
        let g2 = powi(sde.diffusion(t)?, 2);
        let gap = model.slope * x;
        acc += 0.5 * g2 * gap * gap;
    }
    let sm_term = (horizon - eps) * acc / n_mc as f64;
    Ok(KlBound {
        lhs,
        rhs: sm_term + prior_kl,
        sm_term,
        prior_kl,
    })
}
