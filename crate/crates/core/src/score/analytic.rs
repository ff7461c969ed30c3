use alloc::vec;
use alloc::vec::Vec;


use super::{check_batch, ScoreModel};
use crate::math::{exp, ln};
use crate::error::{check_len, contract, Result};
use crate::linalg::{select, Cholesky};
use crate::sde::NonUniformSde;

/// Exact score of a Gaussian target `N(mean, cov)` pushed through a
/// (possibly non-uniform) diagonal SDE:
/// `score(x, t) = -(M cov M + S^2)^{-1} (x - M mean)` with `M = diag(m(t))`,
/// `S = diag(s(t))`.
#[derive(Debug, Clone)]
pub struct AnalyticGaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
    sde: NonUniformSde,
}

impl AnalyticGaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, sde: NonUniformSde) -> Result<Self> {
        let d = mean.len();
        check_len("gaussian covariance", d * d, cov.len())?;
        check_len("gaussian sde dimension", d, sde.dim())?;
        Ok(Self { mean, cov, sde })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn sde(&self) -> &NonUniformSde {
        &self.sde
    }

    /// Marginal over the first `len` coordinates.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..len).collect();
        let d = self.mean.len();
        Self::new(
            self.mean[..len].to_vec(),
            select(&self.cov, d, &idx, &idx),
            self.sde.prefix(len)?,
        )
    }

    /// Mean and covariance of the diffused law at `t`.
    pub fn diffused(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.mean.len();
        let (m, s) = self.sde.kernel_vectors(t)?;
        let mean = self.mean.iter().zip(&m).map(|(a, b)| a * b).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = m[i] * self.cov[i * d + j] * m[j];
            }
            cov[i * d + i] += s[i] * s[i];
        }
        Ok((mean, cov))
    }
}

fn gaussian_score_rows(
    mean: &[f64],
    chol: &Cholesky,
    x: &[f64],
    out: &mut [f64],
) {
    for i in 0..mean.len() {
        out[i] = x[i] - mean[i];
    }
    chol.solve_in_place(out);
    out.iter_mut().for_each(|v| *v = -*v);
}

/// Runs `f(t, row_range)` once per maximal run of rows sharing the same time.
fn for_time_runs(t: &[f64], mut f: impl FnMut(f64, core::ops::Range<usize>) -> Result<()>) -> Result<()> {
    let mut start = 0;
    while start < t.len() {
        let mut end = start + 1;
        while end < t.len() && t[end] == t[start] {
            end += 1;
        }
        f(t[start], start..end)?;
        start = end;
    }
    Ok(())
}

impl ScoreModel for AnalyticGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(self, x, cond, t, out)?;
        let d = self.mean.len();
        for_time_runs(t, |time, rows| {
            let (mean, cov) = self.diffused(time)?;
            let chol = Cholesky::factor(&cov, d)?;
            for r in rows {
                gaussian_score_rows(&mean, &chol, &x[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

/// Exact diffused score of a Gaussian mixture, via the responsibilities of
/// the diffused components. Component covariances may be zero (point
/// masses) as long as the diffused covariance is non-singular.
#[derive(Debug, Clone)]
pub struct AnalyticGmm {
    dim: usize,
    components: Vec<GmmComponent>,
    sde: NonUniformSde,
}

impl AnalyticGmm {
    pub fn new(components: Vec<GmmComponent>, sde: NonUniformSde) -> Result<Self> {
        let dim = sde.dim();
        if components.is_empty() {
            return Err(contract("mixture needs at least one component"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(contract("mixture weights must be positive and sum to one"));
        }
        for c in &components {
            check_len("mixture mean", dim, c.mean.len())?;
            check_len("mixture covariance", dim * dim, c.cov.len())?;
        }
        Ok(Self {
            dim,
            components,
            sde,
        })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }
}

impl ScoreModel for AnalyticGmm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(self, x, cond, t, out)?;
        let d = self.dim;
        let k = self.components.len();
        for_time_runs(t, |time, rows| {
            let mut diffused = Vec::with_capacity(k);
            for c in &self.components {
                let g = AnalyticGaussian::new(c.mean.clone(), c.cov.clone(), self.sde.clone())?;
                let (mean, cov) = g.diffused(time)?;
                let chol = Cholesky::factor(&cov, d)?;
                let log_norm = ln(c.weight) - 0.5 * chol.log_det();
                diffused.push((mean, chol, log_norm));
            }
            let mut comp_scores = vec![0.0; k * d];
            let mut log_w = vec![0.0; k];
            for r in rows {
                let xr = &x[r * d..(r + 1) * d];
                for (j, (mean, chol, log_norm)) in diffused.iter().enumerate() {
                    let sc = &mut comp_scores[j * d..(j + 1) * d];
                    gaussian_score_rows(mean, chol, xr, sc);
                    // -(x - mu)^T C^{-1} (x - mu) / 2 = (x - mu) . score / 2
                    let quad: f64 = xr.iter().zip(mean).zip(sc.iter()).map(|((a, b), s)| (a - b) * s).sum();
                    log_w[j] = log_norm + 0.5 * quad;
                }
                let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let norm: f64 = log_w.iter().map(|l| exp(l - max)).sum();
                let o = &mut out[r * d..(r + 1) * d];
                o.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..k {
                    let resp = exp(log_w[j] - max) / norm;
                    for i in 0..d {
                        o[i] += resp * comp_scores[j * d + i];
                    }
                }
            }
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::SdeSpec;
    use alloc::vec;

    fn ve() -> SdeSpec {
        SdeSpec::ve(0.01, 50.0).unwrap()
    }

    #[test]
    fn standard_normal_under_ve_matches_closed_form() {
        // Diffused covariance is (1 + s^2) I.
        let sde = NonUniformSde::uniform(2, ve()).unwrap();
        let model = AnalyticGaussian::new(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], sde).unwrap();
        let t = 0.4;
        let s = ve().kernel(t).unwrap().std;
        let x = [0.7, -1.3];
        let got = super::super::score_at(&model, &x, t).unwrap();
        for i in 0..2 {
            let want = -x[i] / (1.0 + s * s);
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn score_vanishes_at_diffused_mean() {
        let vp = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
        let sde = NonUniformSde::uniform(2, vp).unwrap();
        let mu = vec![1.5, -0.5];
        let model = AnalyticGaussian::new(mu.clone(), vec![2.0, 0.3, 0.3, 0.5], sde).unwrap();
        let t = 0.3;
        let m = vp.kernel(t).unwrap().mean_scale;
        let x: Vec<f64> = mu.iter().map(|v| v * m).collect();
        let got = super::super::score_at(&model, &x, t).unwrap();
        assert!(got.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_component_mixture_is_bitwise_gaussian() {
        let sde = NonUniformSde::uniform(2, ve()).unwrap();
        let mean = vec![0.3, -0.2];
        let cov = vec![1.0, 0.4, 0.4, 0.8];
        let g = AnalyticGaussian::new(mean.clone(), cov.clone(), sde.clone()).unwrap();
        let gmm = AnalyticGmm::new(vec![GmmComponent { weight: 1.0, mean, cov }], sde).unwrap();
        let x = [0.9, 1.7, -0.4, 0.2];
        let t = [0.25, 0.6];
        let mut a = [0.0; 4];
        let mut b = [0.0; 4];
        g.score_batch(&x, &[], &t, &mut a).unwrap();
        gmm.score_batch(&x, &[], &t, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singular_diffused_covariance_is_an_error() {
        let sde = NonUniformSde::uniform(1, ve()).unwrap();
        let g = AnalyticGaussian::new(vec![0.0], vec![0.0], sde).unwrap();
        // s(eps) = 0 for VE and the target is a point mass.
        let mut out = [0.0];
        let err = g.score_batch(&[0.1], &[], &[ve().epsilon()], &mut out);
        assert!(matches!(err, Err(crate::Error::Singular(_))));
    }
}
