//! Multi-scale diffusion over Haar coefficient groups.
//!
//! With `n` levels the groups are `a_n, d_n, ..., d_1`. Group `d_i` stops
//! diffusing at `T_{d_i} = i / (n + 1)` and `a_n` at 1; every group follows
//! a log-linear SNR variance preserving SDE from `snr_max` at `eps` to
//! `snr_min` at its own terminal time. Score model `i` covers the time
//! range `[(i - 1)/(n + 1), i/(n + 1)]` and sees the still-diffusing prefix
//! `c_i = [a_n, d_n, ..., d_i]` of the flattened coefficient vector.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_len, contract, Result};
use crate::image::Image;
use crate::rng;
use crate::score::{DsmBatch, ScoreModel, Weighting};
use crate::sde::{integrate_reverse, tweedie_denoise, NonUniformSde, Scheme, SdeSpec, TimeGrid};
use crate::wavelet::{coefficients_to_image, image_to_coefficients, Group, PyramidLayout};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSchedule {
    n_levels: usize,
    epsilon: f64,
}

impl ScaleSchedule {
    /// `n_levels = 0` is the degenerate single-range (uniform) schedule.
    pub fn new(n_levels: usize, epsilon: f64) -> Result<Self> {
        let first = 1.0 / (n_levels + 1) as f64;
        if !(epsilon > 0.0 && epsilon < first) {
            return Err(contract(alloc::format!(
                "epsilon must lie in (0, 1/(n+1)) = (0, {first})"
            )));
        }
        Ok(Self { n_levels, epsilon })
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_ranges(&self) -> usize {
        self.n_levels + 1
    }

    pub fn terminal_time(&self, group: Group) -> f64 {
        match group {
            Group::Approx => 1.0,
            Group::Detail(i) => i as f64 / (self.n_levels + 1) as f64,
        }
    }

    /// Terminal times `(T_{d_1}, ..., T_{d_n}, T_{a_n})`.
    pub fn terminal_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (1..=self.n_levels)
            .map(|i| self.terminal_time(Group::Detail(i)))
            .collect();
        out.push(1.0);
        out
    }

    /// Time range of score model `index` (1-based).
    pub fn range(&self, index: usize) -> Result<(f64, f64)> {
        if index == 0 || index > self.n_ranges() {
            return Err(contract(alloc::format!(
                "scale index {index} outside 1..={}",
                self.n_ranges()
            )));
        }
        let k = (self.n_levels + 1) as f64;
        let lo = if index == 1 {
            self.epsilon
        } else {
            (index - 1) as f64 / k
        };
        Ok((lo, index as f64 / k))
    }

    pub fn ranges(&self) -> Vec<(f64, f64)> {
        (1..=self.n_ranges())
            .map(|i| self.range(i).expect("index within range"))
            .collect()
    }

    /// Groups still diffusing at `t`, in generation order.
    pub fn active_groups(&self, t: f64) -> Vec<Group> {
        let mut out = vec![Group::Approx];
        for i in (1..=self.n_levels).rev() {
            if t < self.terminal_time(Group::Detail(i)) {
                out.push(Group::Detail(i));
            }
        }
        out
    }
}

pub fn build_schedule(n_levels: usize, epsilon: f64) -> Result<ScaleSchedule> {
    if n_levels == 0 {
        return Err(contract("multi-scale schedule needs at least one Haar level"));
    }
    ScaleSchedule::new(n_levels, epsilon)
}

/// One log-linear SNR VP SDE per coefficient group, all reaching `snr_min`
/// at their own terminal time.
pub fn design_group_sdes(
    schedule: &ScaleSchedule,
    layout: &PyramidLayout,
    snr_max: f64,
    snr_min: f64,
) -> Result<NonUniformSde> {
    if !(snr_max > snr_min && snr_min > 0.0) {
        return Err(contract("SNR endpoints must satisfy snr_max > snr_min > 0"));
    }
    if layout.levels != schedule.n_levels {
        return Err(contract("layout and schedule disagree on the number of levels"));
    }
    let mut comps = Vec::with_capacity(layout.groups.len());
    for (group, range) in &layout.groups {
        let sde = SdeSpec::vp_log_linear_snr(snr_max, snr_min, schedule.terminal_time(*group))?
            .with_epsilon(schedule.epsilon)?;
        comps.push((range.clone(), sde));
    }
    NonUniformSde::new(layout.total(), comps)
}

/// Length of the prefix `c_i` seen by score model `index` (1-based).
pub fn prefix_len(layout: &PyramidLayout, index: usize) -> Result<usize> {
    let n = layout.levels;
    if index == 0 || index > n + 1 {
        return Err(contract("scale index out of range"));
    }
    if index == n + 1 {
        return Ok(layout.groups[0].1.end);
    }
    layout
        .range(Group::Detail(index))
        .map(|r| r.end)
        .ok_or_else(|| contract("layout is missing a detail level"))
}

pub struct MultiscaleModel {
    pub schedule: ScaleSchedule,
    pub layout: PyramidLayout,
    pub sde: NonUniformSde,
    /// `scale_models[i - 1]` is `s_i`.
    pub scale_models: Vec<Box<dyn ScoreModel>>,
}

impl MultiscaleModel {
    pub fn new(
        schedule: ScaleSchedule,
        layout: PyramidLayout,
        sde: NonUniformSde,
        scale_models: Vec<Box<dyn ScoreModel>>,
    ) -> Result<Self> {
        check_len("multi-scale SDE dimension", layout.total(), sde.dim())?;
        if layout.levels != schedule.n_levels {
            return Err(contract("layout and schedule disagree on the number of levels"));
        }
        check_len("number of scale models", schedule.n_ranges(), scale_models.len())?;
        for (i, m) in scale_models.iter().enumerate() {
            check_len("scale model input dimension", prefix_len(&layout, i + 1)?, m.dim())?;
        }
        Ok(Self {
            schedule,
            layout,
            sde,
            scale_models,
        })
    }

    pub fn cost_profile(&self, steps_per_range: usize) -> CostProfile {
        CostProfile::for_layout(&self.layout, &vec![steps_per_range; self.schedule.n_ranges()])
    }
}

/// DSM draw for score model `index` on a batch of images: `t ~ U(range)`,
/// the prefix `c_i` diffused with its group kernels, likelihood weights
/// `G(t) G(t)^T`.
pub fn multiscale_dsm_batch<R: Rng + ?Sized>(
    schedule: &ScaleSchedule,
    layout: &PyramidLayout,
    sde: &NonUniformSde,
    index: usize,
    images: &[Image],
    weighting: Weighting,
    rng: &mut R,
) -> Result<DsmBatch> {
    let coeffs = images
        .iter()
        .map(|img| image_to_coefficients(img, layout))
        .collect::<Result<Vec<_>>>()?;
    multiscale_dsm_batch_coeffs(schedule, layout, sde, index, &coeffs, weighting, rng)
}

/// As [`multiscale_dsm_batch`] for images already in coefficient space.
pub fn multiscale_dsm_batch_coeffs<R: Rng + ?Sized>(
    schedule: &ScaleSchedule,
    layout: &PyramidLayout,
    sde: &NonUniformSde,
    index: usize,
    coeffs: &[Vec<f64>],
    weighting: Weighting,
    rng: &mut R,
) -> Result<DsmBatch> {
    let (lo, hi) = schedule.range(index)?;
    let len = prefix_len(layout, index)?;
    let sub = sde.prefix(len)?;
    let mut x0 = Vec::with_capacity(coeffs.len() * len);
    for c in coeffs {
        check_len("coefficient vector", layout.total(), c.len())?;
        x0.extend_from_slice(&c[..len]);
    }
    DsmBatch::sample(&sub, &x0, &[], 0, weighting, lo, hi, rng)
}

/// Non-uniform DSM objective of scale model `index` with the likelihood
/// weighting matrix.
pub fn multiscale_dsm_loss<R: Rng + ?Sized>(
    model: &MultiscaleModel,
    index: usize,
    images: &[Image],
    rng: &mut R,
) -> Result<f64> {
    let batch = multiscale_dsm_batch(
        &model.schedule,
        &model.layout,
        &model.sde,
        index,
        images,
        Weighting::LikelihoodMatrix,
        rng,
    )?;
    batch.loss(&*model.scale_models[index - 1])
}

#[derive(Debug, Clone)]
pub struct MultiscaleSamples {
    pub images: Vec<Image>,
    /// Final coefficient rows, `[a_n, d_n, ..., d_1]` per sample.
    pub coefficients: Vec<f64>,
    /// Scalar score inputs processed per sample.
    pub score_inputs_per_sample: usize,
}

/// Cascaded sampler: start `a_n` at the prior on the top range, then at the
/// start of each lower range append the next detail group at its prior and
/// integrate the joint prefix down to the range end. Finishes with the
/// inverse Haar transform, optionally after a Tweedie step at `eps`.
///
/// `steps` gives the Euler-Maruyama step count per range, ordered by range
/// index `1..=n+1`.
pub fn multiscale_sample<R: Rng + ?Sized>(
    model: &MultiscaleModel,
    steps: &[usize],
    n_samples: usize,
    tweedie: bool,
    rng: &mut R,
) -> Result<MultiscaleSamples> {
    let n_ranges = model.schedule.n_ranges();
    check_len("steps per range", n_ranges, steps.len())?;
    let layout = &model.layout;
    let top_len = prefix_len(layout, n_ranges)?;
    let mut width = top_len;
    let mut x = model.sde.prefix(top_len)?.sample_prior(n_samples, rng);
    let mut cost = 0;
    for index in (1..=n_ranges).rev() {
        let len = prefix_len(layout, index)?;
        let sub = model.sde.prefix(len)?;
        if len > width {
            let prior = sub.prior_std_vector();
            let mut wider = Vec::with_capacity(n_samples * len);
            for row in x.chunks(width) {
                wider.extend_from_slice(row);
                for s in &prior[width..len] {
                    wider.push(s * rng::normal(rng));
                }
            }
            x = wider;
            width = len;
        }
        let (lo, hi) = model.schedule.range(index)?;
        let grid = TimeGrid::uniform(hi, lo, steps[index - 1], Scheme::EulerMaruyama)?;
        x = integrate_reverse(&sub, &*model.scale_models[index - 1], &x, &grid, rng)?;
        cost += len * steps[index - 1];
    }
    if tweedie {
        x = tweedie_denoise(&model.sde, &*model.scale_models[0], &x, model.schedule.epsilon)?;
    }
    let total = layout.total();
    let images = if total == 0 {
        Vec::new()
    } else {
        x.chunks(total)
            .map(|row| coefficients_to_image(row, layout))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(MultiscaleSamples {
        images,
        coefficients: x,
        score_inputs_per_sample: cost,
    })
}

/// Score-evaluation cost of the cascade against a uniform model with the
/// same total number of steps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostProfile {
    /// Scalar score inputs per range, ordered by range index `1..=n+1`.
    pub per_range: Vec<usize>,
    pub total: usize,
    pub uniform_baseline: usize,
    /// `uniform_baseline / total`.
    pub ratio: f64,
}

impl CostProfile {
    /// Works for any number of levels including 0 (a single range over the
    /// full image, ratio 1).
    pub fn for_image(channels: usize, height: usize, width: usize, n_levels: usize, steps: &[usize]) -> Result<Self> {
        let full = channels * height * width;
        let sizes: Vec<usize> = if n_levels == 0 {
            vec![full]
        } else {
            let layout = PyramidLayout::new(channels, height, width, n_levels)?;
            (1..=n_levels + 1)
                .map(|i| prefix_len(&layout, i))
                .collect::<Result<_>>()?
        };
        check_len("steps per range", sizes.len(), steps.len())?;
        Ok(Self::from_sizes(&sizes, steps, full))
    }

    pub fn for_layout(layout: &PyramidLayout, steps: &[usize]) -> Self {
        let sizes: Vec<usize> = (1..=layout.levels + 1)
            .map(|i| prefix_len(layout, i).expect("index within range"))
            .collect();
        Self::from_sizes(&sizes, steps, layout.total())
    }

    fn from_sizes(sizes: &[usize], steps: &[usize], full: usize) -> Self {
        let per_range: Vec<usize> = sizes.iter().zip(steps).map(|(s, k)| s * k).collect();
        let total: usize = per_range.iter().sum();
        let uniform_baseline = full * steps.iter().sum::<usize>();
        Self {
            per_range,
            total,
            uniform_baseline,
            ratio: uniform_baseline as f64 / total.max(1) as f64,
        }
    }
}

pub fn cost_profile(model: &MultiscaleModel, steps_per_range: usize) -> CostProfile {
    model.cost_profile(steps_per_range)
}
