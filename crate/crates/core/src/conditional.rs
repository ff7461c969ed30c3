//! Conditional score estimation: CDE (clean condition), CDiffE (condition
//! diffused like the target) and CMDE (condition diffused at its own,
//! usually slower, speed), plus Gaussian and discrete oracles.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{exp, sqrt};
use crate::error::{check_len, contract, Result};
use crate::linalg::{mat_vec, Cholesky};
use crate::rng::{self, StreamRng};
use crate::score::{AnalyticGaussian, BatchSource, DsmBatch, SampleSource, ScoreModel, Weighting};
use crate::sde::{integrate_reverse_with, NonUniformSde, SdeFamily, SdeSpec, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EstimatorKind {
    Cde,
    CDiffE,
    Cmde,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondEstimatorSpec {
    kind: EstimatorKind,
    n_x: usize,
    n_y: usize,
    sde_x: SdeSpec,
    sde_y: Option<SdeSpec>,
    weighting: Weighting,
}

impl CondEstimatorSpec {
    pub fn cde(n_x: usize, n_y: usize, sde_x: SdeSpec, weighting: Weighting) -> Result<Self> {
        Self::build(EstimatorKind::Cde, n_x, n_y, sde_x, None, weighting)
    }

    pub fn cdiffe(n_x: usize, n_y: usize, sde_x: SdeSpec, weighting: Weighting) -> Result<Self> {
        Self::build(EstimatorKind::CDiffE, n_x, n_y, sde_x, Some(sde_x), weighting)
    }

    /// CMDE for a VE target SDE: the condition follows the same geometric
    /// schedule scaled so that its maximum noise level is `sigma_y_max`.
    pub fn cmde(
        n_x: usize,
        n_y: usize,
        sde_x: SdeSpec,
        sigma_y_max: f64,
        weighting: Weighting,
    ) -> Result<Self> {
        let SdeFamily::Ve {
            sigma_min,
            sigma_max,
        } = sde_x.family()
        else {
            return Err(contract("sigma_y_max scaling is defined for VE target SDEs; use cmde_with"));
        };
        if !(sigma_y_max > 0.0 && sigma_y_max.is_finite()) {
            return Err(contract("sigma_y_max must be positive and finite"));
        }
        let k = sigma_y_max / sigma_max;
        let sde_y = SdeSpec::new(
            SdeFamily::Ve {
                sigma_min: sigma_min * k,
                sigma_max: sigma_y_max,
            },
            sde_x.horizon(),
            sde_x.epsilon(),
        )?;
        Self::cmde_with(n_x, n_y, sde_x, sde_y, weighting)
    }

    pub fn cmde_with(
        n_x: usize,
        n_y: usize,
        sde_x: SdeSpec,
        sde_y: SdeSpec,
        weighting: Weighting,
    ) -> Result<Self> {
        Self::build(EstimatorKind::Cmde, n_x, n_y, sde_x, Some(sde_y), weighting)
    }

    fn build(
        kind: EstimatorKind,
        n_x: usize,
        n_y: usize,
        sde_x: SdeSpec,
        sde_y: Option<SdeSpec>,
        weighting: Weighting,
    ) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(contract("conditional estimators need n_x >= 1 and n_y >= 1"));
        }
        if let Some(sy) = sde_y {
            if sy.horizon() != sde_x.horizon() || sy.epsilon() != sde_x.epsilon() {
                return Err(contract("target and condition SDEs must share horizon and epsilon"));
            }
        }
        Ok(Self {
            kind,
            n_x,
            n_y,
            sde_x,
            sde_y,
            weighting,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn sde_x(&self) -> SdeSpec {
        self.sde_x
    }

    pub fn sde_y(&self) -> Option<SdeSpec> {
        self.sde_y
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn x_sde(&self) -> NonUniformSde {
        NonUniformSde::uniform(self.n_x, self.sde_x).expect("n_x >= 1")
    }

    /// Block SDE on `z = (x, y)`; CDE has none.
    pub fn joint_sde(&self) -> Result<NonUniformSde> {
        let sde_y = self.diffused_condition()?;
        NonUniformSde::new(
            self.n_x + self.n_y,
            vec![(0..self.n_x, self.sde_x), (self.n_x..self.n_x + self.n_y, sde_y)],
        )
    }

    /// Diagonal of `Lambda(t)`: squared target diffusion on the first `n_x`
    /// entries, squared condition diffusion on the rest.
    pub fn likelihood_weighting(&self, t: f64) -> Result<Vec<f64>> {
        self.joint_sde()?.likelihood_weights(t)
    }

    fn diffused_condition(&self) -> Result<SdeSpec> {
        self.sde_y
            .ok_or_else(|| contract("CDE keeps the condition clean and has no joint SDE"))
    }
}

fn paired_rows(n_x: usize, n_y: usize, x0: &[f64], y: &[f64]) -> Result<usize> {
    if !x0.len().is_multiple_of(n_x) {
        return Err(contract("target batch length is not a multiple of n_x"));
    }
    let n = x0.len() / n_x;
    if y.len() != n * n_y {
        return Err(contract("target and condition batches are not paired"));
    }
    Ok(n)
}

/// CDE draw: diffuse `x` only and carry `y` as the clean condition.
pub fn cde_batch<R: Rng + ?Sized>(
    spec: &CondEstimatorSpec,
    x0: &[f64],
    y: &[f64],
    rng: &mut R,
) -> Result<DsmBatch> {
    cde_batch_from(spec, x0, y, spec.sde_x.epsilon(), rng)
}

/// As [`cde_batch`] with times drawn from `[t_lo, T]`.
pub fn cde_batch_from<R: Rng + ?Sized>(
    spec: &CondEstimatorSpec,
    x0: &[f64],
    y: &[f64],
    t_lo: f64,
    rng: &mut R,
) -> Result<DsmBatch> {
    if spec.kind != EstimatorKind::Cde {
        return Err(contract("cde_batch needs a CDE estimator"));
    }
    paired_rows(spec.n_x, spec.n_y, x0, y)?;
    let sde = spec.x_sde();
    DsmBatch::sample(&sde, x0, y, spec.n_y, spec.weighting, t_lo, sde.horizon(), rng)
}

pub fn cde_loss<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    spec: &CondEstimatorSpec,
    x0: &[f64],
    y: &[f64],
    rng: &mut R,
) -> Result<f64> {
    cde_batch(spec, x0, y, rng)?.loss(model)
}

/// Joint draw on `z = (x, y)` with the block kernels of the spec.
pub fn joint_batch<R: Rng + ?Sized>(
    spec: &CondEstimatorSpec,
    x0: &[f64],
    y0: &[f64],
    rng: &mut R,
) -> Result<DsmBatch> {
    joint_batch_from(spec, x0, y0, spec.sde_x.epsilon(), rng)
}

/// As [`joint_batch`] with times drawn from `[t_lo, T]`.
pub fn joint_batch_from<R: Rng + ?Sized>(
    spec: &CondEstimatorSpec,
    x0: &[f64],
    y0: &[f64],
    t_lo: f64,
    rng: &mut R,
) -> Result<DsmBatch> {
    let sde = spec.joint_sde()?;
    let n = paired_rows(spec.n_x, spec.n_y, x0, y0)?;
    let z0 = concat_rows(spec.n_x, spec.n_y, x0, y0, n);
    DsmBatch::sample(&sde, &z0, &[], 0, spec.weighting, t_lo, sde.horizon(), rng)
}

pub fn joint_dsm_loss<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    spec: &CondEstimatorSpec,
    x0: &[f64],
    y0: &[f64],
    rng: &mut R,
) -> Result<f64> {
    joint_batch(spec, x0, y0, rng)?.loss(model)
}

fn concat_rows(n_x: usize, n_y: usize, x: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(n * (n_x + n_y));
    for r in 0..n {
        z.extend_from_slice(&x[r * n_x..(r + 1) * n_x]);
        z.extend_from_slice(&y[r * n_y..(r + 1) * n_y]);
    }
    z
}

/// First `n_x` entries of a joint score on `(x, y)`.
pub fn extract_conditional_score(joint: &[f64], n_x: usize, n_y: usize) -> Result<Vec<f64>> {
    check_len("joint score", n_x + n_y, joint.len())?;
    Ok(joint[..n_x].to_vec())
}

/// Paired `(x, y)` training data for the conditional estimators.
pub trait PairSource {
    fn sample_pairs(&mut self, n: usize, rng: &mut StreamRng) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Feeds CDE or joint DSM batches to the trainer, depending on the spec.
/// Training times are drawn from `[t_lo, T]`.
pub struct ConditionalSource<P> {
    pub spec: CondEstimatorSpec,
    pub data: P,
    pub t_lo: f64,
}

impl<P: PairSource> ConditionalSource<P> {
    /// Source over the full range `[eps, T]`.
    pub fn new(spec: CondEstimatorSpec, data: P) -> Self {
        let t_lo = spec.sde_x.epsilon();
        Self { spec, data, t_lo }
    }

    pub fn with_t_lo(mut self, t_lo: f64) -> Result<Self> {
        let sde = self.spec.sde_x;
        if !(t_lo >= sde.epsilon() && t_lo < sde.horizon()) {
            return Err(contract("training time floor must lie in [eps, T)"));
        }
        self.t_lo = t_lo;
        Ok(self)
    }
}

impl<P: PairSource> BatchSource for ConditionalSource<P> {
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> Result<DsmBatch> {
        let (x, y) = self.data.sample_pairs(batch_size, rng)?;
        match self.spec.kind {
            EstimatorKind::Cde => cde_batch_from(&self.spec, &x, &y, self.t_lo, rng),
            _ => joint_batch_from(&self.spec, &x, &y, self.t_lo, rng),
        }
    }
}

/// Draws `n_chains` samples of `x` given a single condition `y`.
///
/// CDE feeds the clean `y` at every step. The diffusive estimators draw a
/// fresh `y_t ~ p(y_t | y)` per chain and step, evaluate the joint score at
/// `(x, y_t, t)` and keep its first `n_x` entries; `y` is never integrated.
pub fn conditional_sample<R: Rng + ?Sized>(
    spec: &CondEstimatorSpec,
    model: &dyn ScoreModel,
    y: &[f64],
    n_chains: usize,
    grid: &TimeGrid,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_len("condition", spec.n_y, y.len())?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(contract("condition must be finite"));
    }
    let (n_x, n_y) = (spec.n_x, spec.n_y);
    let x_sde = spec.x_sde();
    let start = x_sde.sample_prior(n_chains, rng);
    let mut ts = vec![0.0; n_chains];
    match spec.kind {
        EstimatorKind::Cde => {
            check_len("CDE model dimension", n_x, model.dim())?;
            check_len("CDE model condition dimension", n_y, model.cond_dim())?;
            let cond: Vec<f64> = (0..n_chains).flat_map(|_| y.iter().copied()).collect();
            integrate_reverse_with(&x_sde, &start, grid, rng, |x, t, _rng, out| {
                ts.iter_mut().for_each(|v| *v = t);
                model.score_batch(x, &cond, &ts, out)
            })
        }
        EstimatorKind::CDiffE | EstimatorKind::Cmde => {
            let d = n_x + n_y;
            check_len("joint model dimension", d, model.dim())?;
            let sde_y = spec.diffused_condition()?;
            let mut z = vec![0.0; n_chains * d];
            let mut joint = vec![0.0; n_chains * d];
            integrate_reverse_with(&x_sde, &start, grid, rng, |x, t, rng, out| {
                let k = sde_y.kernel(t)?;
                for r in 0..n_chains {
                    z[r * d..r * d + n_x].copy_from_slice(&x[r * n_x..(r + 1) * n_x]);
                    for j in 0..n_y {
                        z[r * d + n_x + j] = k.mean_scale * y[j] + k.std * rng::normal(rng);
                    }
                }
                ts.iter_mut().for_each(|v| *v = t);
                model.score_batch(&z, &[], &ts, &mut joint)?;
                for r in 0..n_chains {
                    out[r * n_x..(r + 1) * n_x].copy_from_slice(&joint[r * d..r * d + n_x]);
                }
                Ok(())
            })
        }
    }
}

/// Jointly Gaussian `(x, y)` with mean `[mu_x; mu_y]` and covariance
/// `[[S_xx, S_xy], [S_yx, S_yy]]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianJoint {
    n_x: usize,
    n_y: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Cholesky,
}

impl GaussianJoint {
    pub fn new(n_x: usize, n_y: usize, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let n = n_x + n_y;
        check_len("joint mean", n, mean.len())?;
        check_len("joint covariance", n * n, cov.len())?;
        for i in 0..n {
            for j in 0..i {
                if (cov[i * n + j] - cov[j * n + i]).abs() > 1e-12 * (1.0 + cov[i * n + j].abs()) {
                    return Err(contract("joint covariance must be symmetric"));
                }
            }
        }
        let chol = Cholesky::factor(&cov, n)?;
        Ok(Self {
            n_x,
            n_y,
            mean,
            cov,
            chol,
        })
    }

    /// Standardised scalar pair with correlation `rho`.
    pub fn standard_pair(rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(contract("correlation must lie in (-1, 1)"));
        }
        Self::new(1, 1, vec![0.0, 0.0], vec![1.0, rho, rho, 1.0])
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    fn block(&self, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>) -> Vec<f64> {
        let n = self.n_x + self.n_y;
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows {
            out.extend_from_slice(&self.cov[i * n + cols.start..i * n + cols.end]);
        }
        out
    }

    /// `n` draws as separate `x` and `y` batches.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let d = self.n_x + self.n_y;
        let mut xs = Vec::with_capacity(n * self.n_x);
        let mut ys = Vec::with_capacity(n * self.n_y);
        let mut z = vec![0.0; d];
        let mut w = vec![0.0; d];
        for _ in 0..n {
            rng::fill_normal(rng, &mut z);
            self.chol.mul_lower(&z, &mut w);
            for (wi, mi) in w.iter_mut().zip(&self.mean) {
                *wi += mi;
            }
            xs.extend_from_slice(&w[..self.n_x]);
            ys.extend_from_slice(&w[self.n_x..]);
        }
        (xs, ys)
    }

    /// Law of `x_t` given the condition: the clean `y` when `sde_y` is
    /// `None`, otherwise `y_t` diffused by `sde_y`.
    pub fn conditional_law(
        &self,
        sde_x: &SdeSpec,
        sde_y: Option<&SdeSpec>,
        t: f64,
    ) -> Result<ConditionalLaw> {
        let (n_x, n_y) = (self.n_x, self.n_y);
        let kx = sde_x.kernel(t)?;
        let (my, sy) = match sde_y {
            Some(s) => {
                let k = s.kernel(t)?;
                (k.mean_scale, k.std)
            }
            None => (1.0, 0.0),
        };
        let mx = kx.mean_scale;
        let sxx = self.block(0..n_x, 0..n_x);
        let sxy = self.block(0..n_x, n_x..n_x + n_y);
        let syy = self.block(n_x..n_x + n_y, n_x..n_x + n_y);
        let mut cww: Vec<f64> = syy.iter().map(|v| my * my * v).collect();
        for j in 0..n_y {
            cww[j * n_y + j] += sy * sy;
        }
        let cww_chol = Cholesky::factor(&cww, n_y)?;
        // gain = C_xw C_ww^{-1}; solve C_ww gain^T = C_wx column by column.
        let mut gain = vec![0.0; n_x * n_y];
        let mut col = vec![0.0; n_y];
        for i in 0..n_x {
            for j in 0..n_y {
                col[j] = mx * my * sxy[i * n_y + j];
            }
            cww_chol.solve_in_place(&mut col);
            gain[i * n_y..(i + 1) * n_y].copy_from_slice(&col);
        }
        let mut cov: Vec<f64> = sxx.iter().map(|v| mx * mx * v).collect();
        for i in 0..n_x {
            cov[i * n_x + i] += kx.var();
            for k in 0..n_x {
                let mut acc = 0.0;
                for j in 0..n_y {
                    acc += gain[i * n_y + j] * mx * my * sxy[k * n_y + j];
                }
                cov[i * n_x + k] -= acc;
            }
        }
        let precision = Cholesky::factor(&cov, n_x)?.inverse();
        let mut offset = vec![0.0; n_x];
        let mu_w: Vec<f64> = self.mean[n_x..].iter().map(|v| my * v).collect();
        mat_vec(&gain, n_x, n_y, &mu_w, &mut offset);
        for i in 0..n_x {
            offset[i] = mx * self.mean[i] - offset[i];
        }
        Ok(ConditionalLaw {
            n_x,
            n_y,
            gain,
            offset,
            cov,
            precision,
        })
    }

    /// Exact posterior mean `E[x | y]`.
    pub fn posterior_mean(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("condition", self.n_y, y.len())?;
        let n_x = self.n_x;
        let mut rhs: Vec<f64> = y.iter().zip(&self.mean[n_x..]).map(|(a, b)| a - b).collect();
        Cholesky::factor(&self.block(n_x..n_x + self.n_y, n_x..n_x + self.n_y), self.n_y)?
            .solve_in_place(&mut rhs);
        let sxy = self.block(0..n_x, n_x..n_x + self.n_y);
        let mut out = vec![0.0; n_x];
        mat_vec(&sxy, n_x, self.n_y, &rhs, &mut out);
        for (o, m) in out.iter_mut().zip(&self.mean[..n_x]) {
            *o += m;
        }
        Ok(out)
    }

    /// Exact score of the diffused joint under `spec`'s block SDE.
    pub fn joint_score_model(&self, spec: &CondEstimatorSpec) -> Result<AnalyticGaussian> {
        self.check_spec(spec)?;
        AnalyticGaussian::new(self.mean.clone(), self.cov.clone(), spec.joint_sde()?)
    }

    fn check_spec(&self, spec: &CondEstimatorSpec) -> Result<()> {
        check_len("spec target dimension", self.n_x, spec.n_x)?;
        check_len("spec condition dimension", self.n_y, spec.n_y)
    }
}

impl SampleSource for GaussianJoint {
    fn dim(&self) -> usize {
        self.n_x + self.n_y
    }

    fn sample(&mut self, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let (x, y) = GaussianJoint::sample(self, n, rng);
        Ok(concat_rows(self.n_x, self.n_y, &x, &y, n))
    }
}

impl PairSource for GaussianJoint {
    fn sample_pairs(&mut self, n: usize, rng: &mut StreamRng) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(GaussianJoint::sample(self, n, rng))
    }
}

/// Gaussian law of `x_t` given a condition `w`: mean `offset + gain w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLaw {
    pub n_x: usize,
    pub n_y: usize,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub cov: Vec<f64>,
    pub precision: Vec<f64>,
}

impl ConditionalLaw {
    pub fn mean(&self, w: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.n_x];
        mat_vec(&self.gain, self.n_x, self.n_y, w, &mut m);
        for (mi, o) in m.iter_mut().zip(&self.offset) {
            *mi += o;
        }
        m
    }

    /// `grad_x ln p(x | w) = -P (x - mean(w))`.
    pub fn score(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let mut diff = self.mean(w);
        for (d, xi) in diff.iter_mut().zip(x) {
            *d = xi - *d;
        }
        mat_vec(&self.precision, self.n_x, self.n_x, &diff, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Exact CDE target `grad_{x_t} ln p(x_t | y)` of a Gaussian joint.
#[derive(Debug, Clone)]
pub struct AnalyticConditional {
    pub joint: GaussianJoint,
    pub sde_x: SdeSpec,
}

impl ScoreModel for AnalyticConditional {
    fn dim(&self) -> usize {
        self.joint.n_x
    }

    fn cond_dim(&self) -> usize {
        self.joint.n_y
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        let n = crate::score::check_batch(self, x, cond, t, out)?;
        let (n_x, n_y) = (self.joint.n_x, self.joint.n_y);
        let mut r = 0;
        while r < n {
            let law = self.joint.conditional_law(&self.sde_x, None, t[r])?;
            let mut end = r;
            while end < n && t[end] == t[r] {
                law.score(
                    &x[end * n_x..(end + 1) * n_x],
                    &cond[end * n_y..(end + 1) * n_y],
                    &mut out[end * n_x..(end + 1) * n_x],
                );
                end += 1;
            }
            r = end;
        }
        Ok(())
    }
}

/// Monte Carlo estimate over `y_t ~ p(y_t | y)` of the squared gap between
/// `grad ln p(x_t | y_t)` and `grad ln p(x_t | y)`, averaged over the rows of
/// `x_grid`. Gaussian-only: both scores are closed form.
pub fn cmde_approx_error<R: Rng + ?Sized>(
    spec: &CondEstimatorSpec,
    joint: &GaussianJoint,
    t: f64,
    y: &[f64],
    x_grid: &[f64],
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    joint.check_spec(spec)?;
    let sde_y = spec.diffused_condition()?;
    check_len("condition", spec.n_y, y.len())?;
    if n_mc == 0 || x_grid.is_empty() || !x_grid.len().is_multiple_of(spec.n_x) {
        return Err(contract("need n_mc >= 1 and a non-empty grid of n_x-vectors"));
    }
    let n_x = spec.n_x;
    let clean = joint.conditional_law(&spec.sde_x, None, t)?;
    let noisy = joint.conditional_law(&spec.sde_x, Some(&sde_y), t)?;
    let ky = sde_y.kernel(t)?;
    let points = x_grid.len() / n_x;
    let mut a = vec![0.0; n_x];
    let mut b = vec![0.0; n_x];
    let mut y_t = vec![0.0; spec.n_y];
    let mut total = 0.0;
    for _ in 0..n_mc {
        for (yt, yi) in y_t.iter_mut().zip(y) {
            *yt = ky.mean_scale * yi + ky.std * rng::normal(rng);
        }
        for x in x_grid.chunks(n_x) {
            noisy.score(x, &y_t, &mut a);
            clean.score(x, y, &mut b);
            total += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
    }
    Ok(total / (n_mc * points) as f64)
}

/// Discrete joint law of scalar `x` and `y` on finite supports:
/// `probs[i * ys.len() + j] = P(x = xs[i], y = ys[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        check_len("joint probability table", xs.len() * ys.len(), probs.len())?;
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(contract("probabilities must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(contract("probabilities must sum to one"));
        }
        Ok(Self { xs, ys, probs })
    }
}

fn gauss_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    exp(-0.5 * z * z) / (std * sqrt(2.0 * core::f64::consts::PI))
}

/// `p(y_t | x_t)` by direct marginalisation of the diffused discrete joint.
pub fn diffused_condition_density(
    table: &DiscreteJoint,
    sde_x: &SdeSpec,
    sde_y: &SdeSpec,
    t: f64,
    x_t: f64,
    y_t: f64,
) -> Result<f64> {
    let kx = sde_x.kernel(t)?;
    let ky = sde_y.kernel(t)?;
    let ny = table.ys.len();
    let mut joint = 0.0;
    let mut marginal = 0.0;
    for (i, &x) in table.xs.iter().enumerate() {
        let l = gauss_pdf(x_t, kx.mean_scale * x, kx.std);
        for (j, &y) in table.ys.iter().enumerate() {
            let p = table.probs[i * ny + j] * l;
            joint += p * gauss_pdf(y_t, ky.mean_scale * y, ky.std);
            marginal += p;
        }
    }
    if marginal <= 0.0 {
        return Err(contract("x_t has zero density under the diffused joint"));
    }
    Ok(joint / marginal)
}

/// Compares `p(y_t | x_t)` computed by marginalising the diffused joint
/// with the Gaussian blur of `p(y | x_t)`, over every `x_t` in `x_t_values`
/// and `y_t` in `y_grid`. Returns the largest absolute deviation.
pub fn blurring_identity_check(
    table: &DiscreteJoint,
    sde_x: &SdeSpec,
    sde_y: &SdeSpec,
    t: f64,
    x_t_values: &[f64],
    y_grid: &[f64],
) -> Result<f64> {
    let kx = sde_x.kernel(t)?;
    let ky = sde_y.kernel(t)?;
    if kx.std <= 0.0 || ky.std <= 0.0 {
        return Err(contract("both kernels need positive std at t"));
    }
    let ny = table.ys.len();
    let mut worst: f64 = 0.0;
    for &xt in x_t_values {
        let lik: Vec<f64> = table
            .xs
            .iter()
            .map(|&x| gauss_pdf(xt, kx.mean_scale * x, kx.std))
            .collect();
        // p(y | x_t) on the discrete support.
        let mut p_y = vec![0.0; ny];
        for (i, l) in lik.iter().enumerate() {
            for j in 0..ny {
                p_y[j] += table.probs[i * ny + j] * l;
            }
        }
        let p_xt: f64 = p_y.iter().sum();
        if p_xt <= 0.0 {
            return Err(contract("x_t has zero density under the diffused joint"));
        }
        p_y.iter_mut().for_each(|p| *p /= p_xt);
        for &yt in y_grid {
            let direct = diffused_condition_density(table, sde_x, sde_y, t, xt, yt)?;
            let blurred: f64 = p_y
                .iter()
                .zip(&table.ys)
                .map(|(p, &y)| p * gauss_pdf(yt, ky.mean_scale * y, ky.std))
                .sum();
            worst = worst.max((direct - blurred).abs());
        }
    }
    Ok(worst)
}
