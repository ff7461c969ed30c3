//! Forward SDE families, closed-form perturbation kernels and reverse-time
//! samplers.
//!
//! Every family has a linear drift `f(x, t) = a(t) x` and a scalar
//! diffusion coefficient `g(t)`, so `p(x_t | x_0)` is Gaussian with mean
//! `m(t) x_0` and standard deviation `s(t)`:
//!
//! | family | `m(t)` | `s(t)^2` |
//! |---|---|---|
//! | VE | 1 | `sigma(t)^2 - sigma(eps)^2`, `sigma(t) = sigma_min (sigma_max/sigma_min)^t` |
//! | VP, linear beta | `exp(-B(t)/2)`, `B(t) = int_0^t beta` | `1 - m(t)^2` |
//! | VP, log-linear SNR | `sqrt(sigmoid(l(t)))` | `sigmoid(-l(t))` |
//!
//! where `l(t)` is the log-SNR, linear from `ln snr_max` at `eps` to
//! `ln snr_min` at the terminal time `T_c`. Small-time residuals: the VE
//! kernel is exactly the identity at `eps`; linear-beta VP has
//! `1 - m(eps) ~ beta_min eps / 2`; log-linear SNR VP has
//! `s(eps)^2 = 1 / (1 + snr_max)` by construction.
//!
//! Past `T_c` a log-linear SNR component is frozen: zero drift, zero
//! diffusion, kernel held at its terminal value.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::math::{exp, exp_m1, ln, sqrt};
use crate::error::{check_len, contract, Error, Result};
use crate::rng;
use crate::score::ScoreModel;

/// Default smallest diffusion time.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Slack allowed when checking that a time lies inside `[eps, horizon]`.
const TIME_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "family", rename_all = "snake_case"))]
pub enum SdeFamily {
    Ve { sigma_min: f64, sigma_max: f64 },
    VpBetaLinear { beta_min: f64, beta_max: f64 },
    VpLogLinearSnr { snr_max: f64, snr_min: f64, terminal_time: f64 },
}

/// A forward SDE with its time domain `[epsilon, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeSpec {
    family: SdeFamily,
    horizon: f64,
    epsilon: f64,
}

/// Closed-form Gaussian transition `p(x_t | x_0) = N(mean_scale x_0, std^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationKernel {
    pub mean_scale: f64,
    pub std: f64,
}

impl PerturbationKernel {
    pub fn var(&self) -> f64 {
        self.std * self.std
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

impl SdeSpec {
    pub fn new(family: SdeFamily, horizon: f64, epsilon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(contract("horizon must be positive and finite"));
        }
        if !(epsilon > 0.0 && epsilon < horizon) {
            return Err(contract("epsilon must lie in (0, horizon)"));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        match family {
            SdeFamily::Ve {
                sigma_min,
                sigma_max,
            } => {
                if !(positive(sigma_min) && positive(sigma_max) && sigma_min < sigma_max) {
                    return Err(contract("VE requires 0 < sigma_min < sigma_max"));
                }
            }
            SdeFamily::VpBetaLinear { beta_min, beta_max } => {
                if !(positive(beta_min) && positive(beta_max) && beta_min < beta_max) {
                    return Err(contract("VP requires 0 < beta_min < beta_max"));
                }
            }
            SdeFamily::VpLogLinearSnr {
                snr_max,
                snr_min,
                terminal_time,
            } => {
                if !(positive(snr_min) && positive(snr_max) && snr_min < snr_max) {
                    return Err(contract("log-linear SNR requires 0 < snr_min < snr_max"));
                }
                if !(terminal_time > epsilon && terminal_time <= horizon) {
                    return Err(contract(
                        "log-linear SNR requires epsilon < terminal_time <= horizon",
                    ));
                }
            }
        }
        Ok(Self {
            family,
            horizon,
            epsilon,
        })
    }

    pub fn ve(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(
            SdeFamily::Ve {
                sigma_min,
                sigma_max,
            },
            1.0,
            DEFAULT_EPSILON,
        )
    }

    pub fn vp_beta_linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(
            SdeFamily::VpBetaLinear { beta_min, beta_max },
            1.0,
            DEFAULT_EPSILON,
        )
    }

    pub fn vp_log_linear_snr(snr_max: f64, snr_min: f64, terminal_time: f64) -> Result<Self> {
        Self::new(
            SdeFamily::VpLogLinearSnr {
                snr_max,
                snr_min,
                terminal_time,
            },
            1.0,
            DEFAULT_EPSILON,
        )
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        Self::new(self.family, self.horizon, epsilon)
    }

    pub fn with_horizon(self, horizon: f64) -> Result<Self> {
        Self::new(self.family, horizon, self.epsilon)
    }

    pub fn family(&self) -> SdeFamily {
        self.family
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Time at which the component stops diffusing.
    pub fn terminal_time(&self) -> f64 {
        match self.family {
            SdeFamily::VpLogLinearSnr { terminal_time, .. } => terminal_time,
            _ => self.horizon,
        }
    }

    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self.family, SdeFamily::Ve { .. })
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        if t.is_finite() && t >= self.epsilon - TIME_SLACK && t <= self.horizon + TIME_SLACK {
            Ok(t.clamp(self.epsilon, self.horizon))
        } else {
            Err(Error::TimeOutOfRange {
                t,
                lo: self.epsilon,
                hi: self.horizon,
            })
        }
    }

    fn log_snr_linear(&self, t: f64) -> (f64, f64) {
        match self.family {
            SdeFamily::VpLogLinearSnr {
                snr_max,
                snr_min,
                terminal_time,
            } => {
                let slope = (ln(snr_min) - ln(snr_max)) / (terminal_time - self.epsilon);
                let tc = t.min(terminal_time);
                (ln(snr_max) + slope * (tc - self.epsilon), slope)
            }
            _ => unreachable!("log-SNR profile requested for a non log-linear family"),
        }
    }

    /// Closed-form `(m(t), s(t))`.
    pub fn kernel(&self, t: f64) -> Result<PerturbationKernel> {
        let t = self.check_time(t)?;
        Ok(match self.family {
            SdeFamily::Ve {
                sigma_min,
                sigma_max,
            } => {
                let two_log_ratio = 2.0 * ln(sigma_max / sigma_min);
                // sigma(t)^2 - sigma(eps)^2 without cancellation
                let var = sigma_min * sigma_min
                    * exp(two_log_ratio * self.epsilon)
                    * exp_m1(two_log_ratio * (t - self.epsilon));
                PerturbationKernel {
                    mean_scale: 1.0,
                    std: sqrt(var.max(0.0)),
                }
            }
            SdeFamily::VpBetaLinear { beta_min, beta_max } => {
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                PerturbationKernel {
                    mean_scale: exp(-0.5 * integral),
                    std: sqrt(-exp_m1(-integral)),
                }
            }
            SdeFamily::VpLogLinearSnr { .. } => {
                let (log_snr, _) = self.log_snr_linear(t);
                PerturbationKernel {
                    mean_scale: sqrt(sigmoid(log_snr)),
                    std: sqrt(sigmoid(-log_snr)),
                }
            }
        })
    }

    /// Signal-to-noise ratio `m^2 / s^2`; `f64::INFINITY` when `s(t) = 0`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        if let SdeFamily::VpLogLinearSnr { .. } = self.family {
            return Ok(exp(self.log_snr_linear(t).0));
        }
        let k = self.kernel(t)?;
        if k.std == 0.0 {
            Ok(f64::INFINITY)
        } else {
            Ok(k.mean_scale * k.mean_scale / k.var())
        }
    }

    /// Linear drift coefficient `a(t)` with `f(x, t) = a(t) x`.
    pub fn drift_coef(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(match self.family {
            SdeFamily::Ve { .. } => 0.0,
            _ => -0.5 * self.beta(t),
        })
    }

    /// Diffusion coefficient `g(t)`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(match self.family {
            SdeFamily::Ve {
                sigma_min,
                sigma_max,
            } => {
                let log_ratio = ln(sigma_max / sigma_min);
                sigma_min * exp(log_ratio * t) * sqrt(2.0 * log_ratio)
            }
            _ => sqrt(self.beta(t)),
        })
    }

    fn beta(&self, t: f64) -> f64 {
        match self.family {
            SdeFamily::VpBetaLinear { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
            SdeFamily::VpLogLinearSnr { terminal_time, .. } => {
                if t >= terminal_time {
                    return 0.0;
                }
                let (log_snr, slope) = self.log_snr_linear(t);
                -slope * sigmoid(-log_snr)
            }
            SdeFamily::Ve { .. } => 0.0,
        }
    }

    /// Standard deviation of the prior `pi`: `s(T)` for VE, 1 for VP.
    pub fn prior_std(&self) -> f64 {
        match self.family {
            SdeFamily::Ve { .. } => self
                .kernel(self.horizon)
                .map(|k| k.std)
                .unwrap_or(f64::NAN),
            _ => 1.0,
        }
    }
}

/// Free-function form of [`SdeSpec::kernel`].
pub fn perturbation_kernel(sde: &SdeSpec, t: f64) -> Result<PerturbationKernel> {
    sde.kernel(t)
}

pub fn snr(sde: &SdeSpec, t: f64) -> Result<f64> {
    sde.snr(t)
}

/// Diagonal SDE over a `dim`-dimensional state where each index range
/// diffuses with its own [`SdeSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct NonUniformSde {
    dim: usize,
    components: Vec<(Range<usize>, SdeSpec)>,
}

impl NonUniformSde {
    /// Components must partition `0..dim` without overlap; order is free.
    pub fn new(dim: usize, mut components: Vec<(Range<usize>, SdeSpec)>) -> Result<Self> {
        components.sort_by_key(|(r, _)| r.start);
        let mut next = 0;
        for (r, _) in &components {
            if r.start != next || r.end <= r.start {
                return Err(contract("component ranges must partition the state without gaps or overlap"));
            }
            next = r.end;
        }
        if next != dim {
            return Err(contract("component ranges must cover the whole state"));
        }
        Ok(Self { dim, components })
    }

    pub fn uniform(dim: usize, sde: SdeSpec) -> Result<Self> {
        Self::new(dim, vec![(0..dim, sde)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[(Range<usize>, SdeSpec)] {
        &self.components
    }

    /// Restriction to the first `len` coordinates.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.dim {
            return Err(contract("prefix length must be in 1..=dim"));
        }
        let comps = self
            .components
            .iter()
            .filter(|(r, _)| r.start < len)
            .map(|(r, s)| (r.start..r.end.min(len), *s))
            .collect();
        Self::new(len, comps)
    }

    pub fn epsilon(&self) -> f64 {
        self.components
            .iter()
            .map(|(_, s)| s.epsilon())
            .fold(0.0, f64::max)
    }

    pub fn horizon(&self) -> f64 {
        self.components
            .iter()
            .map(|(_, s)| s.horizon())
            .fold(f64::INFINITY, f64::min)
    }

    /// Per-coordinate kernel mean scales and standard deviations.
    pub fn kernel_vectors(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut m = vec![0.0; self.dim];
        let mut s = vec![0.0; self.dim];
        for (r, sde) in &self.components {
            let k = sde.kernel(t)?;
            m[r.clone()].iter_mut().for_each(|v| *v = k.mean_scale);
            s[r.clone()].iter_mut().for_each(|v| *v = k.std);
        }
        Ok((m, s))
    }

    /// Diagonal of `G(t)`.
    pub fn diffusion_vector(&self, t: f64) -> Result<Vec<f64>> {
        self.per_coordinate(t, |s, t| s.diffusion(t))
    }

    pub fn drift_vector(&self, t: f64) -> Result<Vec<f64>> {
        self.per_coordinate(t, |s, t| s.drift_coef(t))
    }

    /// Diagonal of the likelihood weighting matrix `G(t) G(t)^T`.
    pub fn likelihood_weights(&self, t: f64) -> Result<Vec<f64>> {
        let mut g = self.diffusion_vector(t)?;
        g.iter_mut().for_each(|v| *v *= *v);
        Ok(g)
    }

    pub fn prior_std_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (r, sde) in &self.components {
            let p = sde.prior_std();
            out[r.clone()].iter_mut().for_each(|v| *v = p);
        }
        out
    }

    fn per_coordinate(
        &self,
        t: f64,
        f: impl Fn(&SdeSpec, f64) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for (r, sde) in &self.components {
            let v = f(sde, t)?;
            out[r.clone()].iter_mut().for_each(|o| *o = v);
        }
        Ok(out)
    }

    /// Draws `n` rows from the prior, row-major.
    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let std = self.prior_std_vector();
        let mut out = vec![0.0; n * self.dim];
        for row in out.chunks_mut(self.dim) {
            for (v, s) in row.iter_mut().zip(&std) {
                *v = s * rng::normal(rng);
            }
        }
        out
    }
}

/// One exact draw of `x_t | x_0` for every row of `x0`.
pub fn diffuse<R: Rng + ?Sized>(
    sde: &NonUniformSde,
    x0: &[f64],
    t: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = sde.dim();
    if d == 0 || !x0.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            what: "diffuse input",
            expected: d,
            found: x0.len(),
        });
    }
    let (m, s) = sde.kernel_vectors(t)?;
    let mut out = vec![0.0; x0.len()];
    for (row_out, row_in) in out.chunks_mut(d).zip(x0.chunks(d)) {
        for i in 0..d {
            row_out[i] = m[i] * row_in[i] + s[i] * rng::normal(rng);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scheme {
    EulerMaruyama,
    ProbabilityFlowEuler,
}

/// Strictly decreasing integration times from `t_start` to `t_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    scheme: Scheme,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>, scheme: Scheme) -> Result<Self> {
        if points.len() < 2 {
            return Err(contract("time grid needs at least one step"));
        }
        if points.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(contract("time grid must be strictly decreasing"));
        }
        Ok(Self { points, scheme })
    }

    pub fn uniform(t_start: f64, t_end: f64, steps: usize, scheme: Scheme) -> Result<Self> {
        if steps == 0 {
            return Err(contract("time grid needs at least one step"));
        }
        let h = (t_start - t_end) / steps as f64;
        let mut points: Vec<f64> = (0..steps).map(|k| t_start - h * k as f64).collect();
        points.push(t_end);
        Self::new(points, scheme)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    fn check_within(&self, sde: &NonUniformSde) -> Result<()> {
        let (lo, hi) = (sde.epsilon(), sde.horizon());
        for &t in &self.points {
            if !(t >= lo - TIME_SLACK && t <= hi + TIME_SLACK) {
                return Err(Error::TimeOutOfRange { t, lo, hi });
            }
        }
        Ok(())
    }
}

fn batch_rows(sde: &NonUniformSde, x: &[f64]) -> Result<usize> {
    let d = sde.dim();
    if !x.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            what: "state batch",
            expected: d,
            found: x.len() % d,
        });
    }
    Ok(x.len() / d)
}

/// `f(x, t) - G(t) G(t)^T s(x, t)` for every row of `x`.
pub fn reverse_drift(
    sde: &NonUniformSde,
    score: &dyn ScoreModel,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_len("score model dimension", sde.dim(), score.dim())?;
    let n = batch_rows(sde, x)?;
    let mut s = vec![0.0; x.len()];
    score.score_batch(x, &[], &vec![t; n], &mut s)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "score output",
            step: 0,
        });
    }
    let a = sde.drift_vector(t)?;
    let g2 = sde.likelihood_weights(t)?;
    let d = sde.dim();
    for (i, v) in s.iter_mut().enumerate() {
        let k = i % d;
        *v = a[k] * x[i] - g2[k] * *v;
    }
    Ok(s)
}

/// Integrates the reverse-time dynamics over `grid` for a batch of chains.
///
/// Euler-Maruyama: `x <- x + (f - G G^T s) dt + G sqrt(|dt|) xi` with
/// `dt = t_{k+1} - t_k < 0`. Probability flow: `x <- x + (f - G G^T s / 2) dt`.
pub fn integrate_reverse<R: Rng + ?Sized>(
    sde: &NonUniformSde,
    score: &dyn ScoreModel,
    x_start: &[f64],
    grid: &TimeGrid,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_len("score model dimension", sde.dim(), score.dim())?;
    if score.cond_dim() != 0 {
        return Err(contract("conditional score model needs a condition input"));
    }
    let n = batch_rows(sde, x_start)?;
    let mut ts = vec![0.0; n];
    integrate_reverse_with(sde, x_start, grid, rng, |x, t, _rng, out| {
        ts.iter_mut().for_each(|v| *v = t);
        score.score_batch(x, &[], &ts, out)
    })
}

/// Same as [`integrate_reverse`] with the score supplied by a closure that
/// also receives the random stream (used by the diffusive conditional
/// estimators to redraw the condition each step).
pub fn integrate_reverse_with<R, F>(
    sde: &NonUniformSde,
    x_start: &[f64],
    grid: &TimeGrid,
    rng: &mut R,
    mut score_fn: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], f64, &mut R, &mut [f64]) -> Result<()>,
{
    grid.check_within(sde)?;
    batch_rows(sde, x_start)?;
    check_finite(x_start, 0)?;
    let d = sde.dim();
    let mut x = x_start.to_vec();
    let mut s = vec![0.0; x.len()];
    for (step, w) in grid.points.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        score_fn(&x, t, rng, &mut s)?;
        euler_step(sde, grid.scheme, &mut x, &s, t, t_next - t, d, || rng::normal(rng))?;
        check_finite(&x, step)?;
    }
    Ok(x)
}

/// Reverse integration with externally supplied driving noise:
/// `noise_fn(step, buf)` fills one standard normal per state entry. Used for
/// coupled or antithetic runs; with [`Scheme::ProbabilityFlowEuler`] the
/// noise is ignored.
pub fn integrate_reverse_driven<S, N>(
    sde: &NonUniformSde,
    x_start: &[f64],
    grid: &TimeGrid,
    mut score_fn: S,
    mut noise_fn: N,
) -> Result<Vec<f64>>
where
    S: FnMut(&[f64], f64, &mut [f64]) -> Result<()>,
    N: FnMut(usize, &mut [f64]),
{
    grid.check_within(sde)?;
    batch_rows(sde, x_start)?;
    check_finite(x_start, 0)?;
    let d = sde.dim();
    let mut x = x_start.to_vec();
    let mut s = vec![0.0; x.len()];
    let mut xi = vec![0.0; x.len()];
    for (step, w) in grid.points.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        score_fn(&x, t, &mut s)?;
        noise_fn(step, &mut xi);
        let mut k = 0;
        euler_step(sde, grid.scheme, &mut x, &s, t, t_next - t, d, || {
            k += 1;
            xi[k - 1]
        })?;
        check_finite(&x, step)?;
    }
    Ok(x)
}

fn check_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "reverse integration",
            step,
        });
    }
    Ok(())
}

/// One Euler step in place. `noise` is called once per state entry, in
/// order, and only for the stochastic scheme.
#[allow(clippy::too_many_arguments)]
fn euler_step(
    sde: &NonUniformSde,
    scheme: Scheme,
    x: &mut [f64],
    s: &[f64],
    t: f64,
    dt: f64,
    d: usize,
    mut noise: impl FnMut() -> f64,
) -> Result<()> {
    let a = sde.drift_vector(t)?;
    let g = sde.diffusion_vector(t)?;
    match scheme {
        Scheme::EulerMaruyama => {
            let noise_scale = sqrt(-dt);
            for (i, xi) in x.iter_mut().enumerate() {
                let k = i % d;
                let drift = a[k] * *xi - g[k] * g[k] * s[i];
                *xi += drift * dt + g[k] * noise_scale * noise();
            }
        }
        Scheme::ProbabilityFlowEuler => {
            for (i, xi) in x.iter_mut().enumerate() {
                let k = i % d;
                *xi += (a[k] * *xi - 0.5 * g[k] * g[k] * s[i]) * dt;
            }
        }
    }
    Ok(())
}

/// Posterior-mean estimate of `x_0`: `(x + s(t)^2 score(x, t)) / m(t)`.
pub fn tweedie_denoise(
    sde: &NonUniformSde,
    score: &dyn ScoreModel,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_len("score model dimension", sde.dim(), score.dim())?;
    let n = batch_rows(sde, x)?;
    let (m, s) = sde.kernel_vectors(t)?;
    if m.iter().any(|&v| v <= 1e-12) {
        return Err(contract("Tweedie denoising needs m(t) above 1e-12"));
    }
    let mut out = vec![0.0; x.len()];
    score.score_batch(x, &[], &vec![t; n], &mut out)?;
    let d = sde.dim();
    for (i, o) in out.iter_mut().enumerate() {
        let k = i % d;
        *o = (x[i] + s[k] * s[k] * *o) / m[k];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::score::{AnalyticGaussian, ScoreModel};
    use proptest::prelude::*;

    struct Zero(usize);
    impl ScoreModel for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn score_batch(&self, _x: &[f64], _c: &[f64], _t: &[f64], out: &mut [f64]) -> Result<()> {
            out.iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        }
    }

    fn families() -> [SdeSpec; 3] {
        [
            SdeSpec::ve(0.01, 50.0).unwrap(),
            SdeSpec::vp_beta_linear(0.1, 20.0).unwrap(),
            SdeSpec::vp_log_linear_snr(1e4, 1e-3, 1.0).unwrap(),
        ]
    }

    #[test]
    fn ve_kernel_degenerates_at_epsilon() {
        let sde = SdeSpec::ve(0.01, 50.0).unwrap();
        let k = sde.kernel(sde.epsilon()).unwrap();
        assert_eq!((k.mean_scale, k.std), (1.0, 0.0));
        assert_eq!(sde.snr(sde.epsilon()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ve_kernel_closed_form() {
        let sde = SdeSpec::ve(0.01, 50.0).unwrap();
        let sigma = |t: f64| 0.01 * 5000f64.powf(t);
        for t in [0.1, 0.5, 1.0] {
            let want = (sigma(t).powi(2) - sigma(1e-5).powi(2)).sqrt();
            assert!((sde.kernel(t).unwrap().std - want).abs() < 1e-12 * want);
        }
    }

    #[test]
    fn vp_families_preserve_variance() {
        for sde in &families()[1..] {
            for k in 0..=1000 {
                let t = 1e-5 + (1.0 - 1e-5) * k as f64 / 1000.0;
                let p = sde.kernel(t).unwrap();
                assert!((p.mean_scale.powi(2) + p.var() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_linear_snr_endpoints_and_midpoint() {
        let sde = SdeSpec::vp_log_linear_snr(1e4, 1e-3, 0.5).unwrap();
        let eps = sde.epsilon();
        assert!((sde.snr(eps).unwrap() / 1e4 - 1.0).abs() < 1e-12);
        assert!((sde.snr(0.5).unwrap() / 1e-3 - 1.0).abs() < 1e-12);
        let mid = sde.snr(0.5 * (eps + 0.5)).unwrap();
        assert!((mid / (1e4f64 * 1e-3).sqrt() - 1.0).abs() < 1e-12);
        let k = sde.kernel(0.3).unwrap();
        assert!((k.mean_scale.powi(2) / k.var() - sde.snr(0.3).unwrap()).abs() < 1e-9 * sde.snr(0.3).unwrap());
    }

    #[test]
    fn log_linear_freezes_past_terminal_time() {
        let sde = SdeSpec::vp_log_linear_snr(1e4, 1e-3, 0.5).unwrap();
        assert_eq!(sde.kernel(0.5).unwrap(), sde.kernel(0.9).unwrap());
        assert_eq!(sde.diffusion(0.7).unwrap(), 0.0);
        assert!(sde.diffusion(0.49).unwrap() > 0.0);
    }

    #[test]
    fn times_outside_domain_are_rejected() {
        for sde in families() {
            assert!(matches!(sde.kernel(0.0), Err(Error::TimeOutOfRange { .. })));
            assert!(sde.kernel(1.5).is_err());
            assert!(sde.snr(f64::NAN).is_err());
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(SdeSpec::ve(1.0, 0.5).is_err());
        assert!(SdeSpec::vp_beta_linear(2.0, 1.0).is_err());
        assert!(SdeSpec::vp_log_linear_snr(1.0, 10.0, 1.0).is_err());
        assert!(SdeSpec::vp_log_linear_snr(10.0, 1.0, 1.5).is_err());
        assert!(SdeSpec::ve(0.1, 1.0).unwrap().with_epsilon(1.0).is_err());
    }

    #[test]
    fn vp_kernel_matches_drift_integral() {
        // m(t) = exp(int_0^t a), checked with Simpson on the drift coefficient.
        let sde = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
        let t = 0.5;
        let n = 2000;
        let h = (t - 1e-5) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * sde.drift_coef(1e-5 + i as f64 * h).unwrap();
        }
        let head = -0.5 * (0.1 * 1e-5 + 0.5 * 19.9 * 1e-10);
        let m = (acc * h / 3.0 + head).exp();
        assert!((m - sde.kernel(t).unwrap().mean_scale).abs() < 1e-10);
    }

    #[test]
    fn non_uniform_components_must_partition() {
        let s = SdeSpec::ve(0.1, 1.0).unwrap();
        assert!(NonUniformSde::new(3, vec![(0..2, s), (1..3, s)]).is_err());
        assert!(NonUniformSde::new(3, vec![(0..2, s)]).is_err());
        assert!(NonUniformSde::new(3, vec![(2..3, s), (0..2, s)]).is_ok());
    }

    #[test]
    fn diffuse_identity_at_epsilon_and_matches_std() {
        let s1 = SdeSpec::ve(0.01, 50.0).unwrap();
        let s2 = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
        let sde = NonUniformSde::new(2, vec![(0..1, s1), (1..2, s2)]).unwrap();
        let mut rng = stream(11, 0);
        let x0 = vec![0.3, -0.7];
        let at_eps = diffuse(&sde, &x0, 1e-5, &mut rng).unwrap();
        assert!((at_eps[0] - 0.3).abs() < 1e-12);
        assert!((at_eps[1] + 0.7).abs() < 1e-2);
        let n = 100_000;
        let zeros = vec![0.0; 2 * n];
        let t = 0.6;
        let xt = diffuse(&sde, &zeros, t, &mut rng).unwrap();
        let (_, s) = sde.kernel_vectors(t).unwrap();
        for c in 0..2 {
            let var = xt.iter().skip(c).step_by(2).map(|v| v * v).sum::<f64>() / n as f64;
            assert!((var.sqrt() / s[c] - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn reverse_drift_with_zero_score_is_forward_drift() {
        let sde = NonUniformSde::uniform(2, SdeSpec::vp_beta_linear(0.1, 20.0).unwrap()).unwrap();
        let x = [1.0, -2.0];
        let d = reverse_drift(&sde, &Zero(2), &x, 0.4).unwrap();
        let a = -0.5 * (0.1 + 0.4 * 19.9);
        assert_eq!(d, vec![a * 1.0, a * -2.0]);
    }

    #[test]
    fn reverse_drift_for_standard_normal_at_epsilon() {
        let s = SdeSpec::ve(0.01, 50.0).unwrap();
        let sde = NonUniformSde::uniform(1, s).unwrap();
        let model = AnalyticGaussian::new(vec![0.0], vec![1.0], sde.clone()).unwrap();
        let g2 = s.diffusion(1e-5).unwrap().powi(2);
        for x in [-1.5, 0.2, 3.0] {
            let d = reverse_drift(&sde, &model, &[x], 1e-5).unwrap();
            assert!((d[0] - g2 * x).abs() < 1e-12 * (1.0 + g2 * x.abs()));
        }
    }

    #[test]
    fn reverse_drift_scales_each_coordinate() {
        struct Ones;
        impl ScoreModel for Ones {
            fn dim(&self) -> usize {
                2
            }
            fn score_batch(&self, _x: &[f64], _c: &[f64], _t: &[f64], out: &mut [f64]) -> Result<()> {
                out.iter_mut().for_each(|v| *v = 1.0);
                Ok(())
            }
        }
        let a = SdeSpec::ve(0.01, 1.0).unwrap();
        let b = SdeSpec::ve(0.01, 100.0).unwrap();
        let sde = NonUniformSde::new(2, vec![(0..1, a), (1..2, b)]).unwrap();
        let t = 0.5;
        let d = reverse_drift(&sde, &Ones, &[0.0, 0.0], t).unwrap();
        assert_eq!(d[0], -a.diffusion(t).unwrap().powi(2));
        assert_eq!(d[1], -b.diffusion(t).unwrap().powi(2));
    }

    #[test]
    fn single_probability_flow_step_is_pure_drift() {
        let s = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
        let sde = NonUniformSde::uniform(1, s).unwrap();
        let grid = TimeGrid::new(vec![0.8, 0.7], Scheme::ProbabilityFlowEuler).unwrap();
        let x = integrate_reverse(&sde, &Zero(1), &[2.0], &grid, &mut stream(0, 0)).unwrap();
        let a = s.drift_coef(0.8).unwrap();
        assert_eq!(x[0], 2.0 + a * 2.0 * (0.7 - 0.8));
    }

    #[test]
    fn grids_must_decrease_inside_the_domain() {
        assert!(TimeGrid::new(vec![0.5, 0.5], Scheme::EulerMaruyama).is_err());
        assert!(TimeGrid::new(vec![0.5], Scheme::EulerMaruyama).is_err());
        let sde = NonUniformSde::uniform(1, SdeSpec::ve(0.1, 1.0).unwrap()).unwrap();
        let grid = TimeGrid::uniform(1.2, 0.5, 4, Scheme::EulerMaruyama).unwrap();
        assert!(integrate_reverse(&sde, &Zero(1), &[0.0], &grid, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        struct Huge;
        impl ScoreModel for Huge {
            fn dim(&self) -> usize {
                1
            }
            fn score_batch(&self, x: &[f64], _c: &[f64], _t: &[f64], out: &mut [f64]) -> Result<()> {
                out[0] = -1e300 * x[0].abs().max(1.0);
                Ok(())
            }
        }
        let sde = NonUniformSde::uniform(1, SdeSpec::ve(0.1, 10.0).unwrap()).unwrap();
        let grid = TimeGrid::uniform(1.0, 0.1, 10, Scheme::ProbabilityFlowEuler).unwrap();
        let err = integrate_reverse(&sde, &Huge, &[1.0], &grid, &mut stream(0, 0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step, .. } if step <= 1));
    }

    #[test]
    fn tweedie_with_exact_score_is_posterior_mean() {
        let s = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
        let sde = NonUniformSde::uniform(1, s).unwrap();
        let model = AnalyticGaussian::new(vec![0.5], vec![2.0], sde.clone()).unwrap();
        let t = 0.3;
        let k = s.kernel(t).unwrap();
        let x = 0.9;
        let got = tweedie_denoise(&sde, &model, &[x], t).unwrap()[0];
        // E[x0 | xt] for Gaussian prior and kernel.
        let v = k.mean_scale.powi(2) * 2.0 + k.var();
        let want = 0.5 + 2.0 * k.mean_scale * (x - k.mean_scale * 0.5) / v;
        assert!((got - want).abs() < 1e-12);
        let at_eps = tweedie_denoise(&sde, &model, &[x], 1e-5).unwrap()[0];
        assert!((at_eps - x).abs() < 1e-4);
    }

    #[test]
    fn tweedie_rejects_vanishing_mean_scale() {
        let s = SdeSpec::vp_beta_linear(0.1, 20000.0).unwrap();
        let sde = NonUniformSde::uniform(1, s).unwrap();
        assert!(tweedie_denoise(&sde, &Zero(1), &[1.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn kernel_std_increases_and_diffusion_is_positive(
            which in 0usize..3,
            a in 1e-4f64..0.999,
            b in 1e-4f64..0.999,
        ) {
            let sde = families()[which];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-6);
            prop_assert!(sde.kernel(lo).unwrap().std < sde.kernel(hi).unwrap().std);
            prop_assert!(sde.diffusion(lo).unwrap() > 0.0);
        }
    }
}
