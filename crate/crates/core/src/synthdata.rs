//! Synthetic datasets and forward operators for desk-scale inverse problems.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{cos, exp, hypot, powi, sin, sqrt};
use crate::conditional::{GaussianJoint, PairSource};
use crate::error::{contract, Result};
use crate::image::Image;
use crate::linalg::Cholesky;
use crate::rng::{self, StreamRng};
use crate::score::{GmmComponent, SampleSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ToyPattern {
    Checkerboard,
    Blob,
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    /// `N(mean, cov)` on flat vectors.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    /// Mixture with the given components, rows of `mean.len()`.
    Gmm { components: Vec<GmmComponent> },
    /// Rows `[x; y]`.
    JointGaussian(GaussianJoint),
    /// Single-channel images with values in `[0, 1]`.
    ToyImages {
        pattern: ToyPattern,
        height: usize,
        width: usize,
    },
}

impl Dataset {
    /// Two equal-weight isotropic modes at `+-offset` along the first axis.
    pub fn symmetric_gmm2d(offset: f64, std: f64) -> Self {
        let var = std * std;
        let comp = |m: f64| GmmComponent {
            weight: 0.5,
            mean: vec![m, 0.0],
            cov: vec![var, 0.0, 0.0, var],
        };
        Dataset::Gmm {
            components: vec![comp(-offset), comp(offset)],
        }
    }

    /// Zero-mean stationary Gaussian images with covariance
    /// `var * exp(-|p - q| / length)` between pixel positions.
    pub fn smooth_gaussian_images(height: usize, width: usize, length: f64, var: f64) -> Self {
        let n = height * width;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (yi, xi) = ((i / width) as f64, (i % width) as f64);
                let (yj, xj) = ((j / width) as f64, (j % width) as f64);
                let r = sqrt(powi(yi - yj, 2) + powi(xi - xj, 2));
                cov[i * n + j] = var * exp(-r / length);
            }
        }
        Dataset::Gaussian {
            mean: vec![0.0; n],
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Gaussian { mean, .. } => mean.len(),
            Dataset::Gmm { components } => components.first().map_or(0, |c| c.mean.len()),
            Dataset::JointGaussian(j) => j.n_x() + j.n_y(),
            Dataset::ToyImages { height, width, .. } => height * width,
        }
    }
}

/// [`Dataset`] with its factorisations prepared once.
#[derive(Debug, Clone)]
pub struct DatasetSampler {
    dataset: Dataset,
    factors: Vec<Option<Cholesky>>,
}

impl DatasetSampler {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let factors = match &dataset {
            Dataset::Gaussian { mean, cov } => {
                if cov.len() != mean.len() * mean.len() {
                    return Err(contract("Gaussian covariance must be dim x dim"));
                }
                vec![Some(Cholesky::factor(cov, mean.len())?)]
            }
            Dataset::Gmm { components } => {
                if components.is_empty() {
                    return Err(contract("mixture needs at least one component"));
                }
                let d = components[0].mean.len();
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(contract("mixture weights must be positive and sum to one"));
                }
                components
                    .iter()
                    .map(|c| {
                        if c.mean.len() != d || c.cov.len() != d * d {
                            return Err(contract("mixture components must share one dimension"));
                        }
                        Cholesky::factor(&c.cov, d).map(Some)
                    })
                    .collect::<Result<_>>()?
            }
            Dataset::JointGaussian(_) => Vec::new(),
            Dataset::ToyImages { height, width, .. } => {
                if *height < 2 || *width < 2 {
                    return Err(contract("toy images need at least 2 x 2 pixels"));
                }
                Vec::new()
            }
        };
        Ok(Self { dataset, factors })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    /// `n` i.i.d. draws as row-major rows.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dataset.dim();
        let mut out = Vec::with_capacity(n * d);
        match &self.dataset {
            Dataset::Gaussian { mean, .. } => {
                let chol = self.factors[0].as_ref().expect("factored at construction");
                for _ in 0..n {
                    gaussian_row(mean, chol, rng, &mut out);
                }
            }
            Dataset::Gmm { components } => {
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = components.len() - 1;
                    for (i, c) in components.iter().enumerate() {
                        acc += c.weight;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    let chol = self.factors[k].as_ref().expect("factored at construction");
                    gaussian_row(&components[k].mean, chol, rng, &mut out);
                }
            }
            Dataset::JointGaussian(j) => {
                for _ in 0..n {
                    let (x, y) = j.sample(1, rng);
                    out.extend_from_slice(&x);
                    out.extend_from_slice(&y);
                }
            }
            Dataset::ToyImages {
                pattern,
                height,
                width,
            } => {
                for _ in 0..n {
                    out.extend_from_slice(&toy_image(*pattern, *height, *width, rng).data);
                }
            }
        }
        out
    }
}

fn gaussian_row<R: Rng + ?Sized>(mean: &[f64], chol: &Cholesky, rng: &mut R, out: &mut Vec<f64>) {
    let d = mean.len();
    let mut z = vec![0.0; d];
    rng::fill_normal(rng, &mut z);
    let mut w = vec![0.0; d];
    chol.mul_lower(&z, &mut w);
    out.extend(w.iter().zip(mean).map(|(a, b)| a + b));
}

/// `n >= 1` i.i.d. draws from `dataset`.
pub fn sample_dataset<R: Rng + ?Sized>(dataset: &Dataset, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(contract("sample_dataset needs n >= 1"));
    }
    Ok(DatasetSampler::new(dataset.clone())?.sample(n, rng))
}

impl SampleSource for DatasetSampler {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn sample(&mut self, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        Ok(DatasetSampler::sample(self, n, rng))
    }
}

impl PairSource for DatasetSampler {
    fn sample_pairs(&mut self, n: usize, rng: &mut StreamRng) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.dataset {
            Dataset::JointGaussian(j) => Ok(j.sample(n, rng)),
            _ => Err(contract("paired samples need a joint Gaussian dataset")),
        }
    }
}

fn toy_image<R: Rng + ?Sized>(pattern: ToyPattern, h: usize, w: usize, rng: &mut R) -> Image {
    let mut img = Image::zeros(1, h, w);
    match pattern {
        ToyPattern::Checkerboard => {
            let cell = rng.random_range(1..=(h.min(w) / 2).max(1));
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let (lo, hi) = (rng.random_range(0.0..0.3), rng.random_range(0.7..1.0));
            for y in 0..h {
                for x in 0..w {
                    let odd = ((y + oy) / cell + (x + ox) / cell) % 2 == 1;
                    *img.at_mut(0, y, x) = if odd { hi } else { lo };
                }
            }
        }
        ToyPattern::Blob => {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let r = rng.random_range(0.15..0.35) * h.min(w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = powi(y as f64 + 0.5 - cy, 2) + powi(x as f64 + 0.5 - cx, 2);
                    *img.at_mut(0, y, x) = exp(-0.5 * d2 / (r * r));
                }
            }
        }
        ToyPattern::Gradient => {
            let angle = rng.random_range(0.0..2.0 * core::f64::consts::PI);
            let (dy, dx) = (sin(angle), cos(angle));
            let span = hypot(h as f64, w as f64);
            for y in 0..h {
                for x in 0..w {
                    let u = (y as f64 - 0.5 * h as f64) * dy + (x as f64 - 0.5 * w as f64) * dx;
                    *img.at_mut(0, y, x) = (0.5 + u / span).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Square mask region, top-left corner and side lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ForwardOperator {
    /// Zeroes a half-height, half-width block (25% of pixels) at a uniform
    /// random position drawn from the supplied stream.
    Mask,
    /// Average pooling over `factor x factor` blocks.
    Downsample { factor: usize },
    /// Per-pixel norm of forward differences (zero past the last row/column).
    EdgeMagnitude,
}

impl ForwardOperator {
    pub fn output_shape(&self, channels: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        match *self {
            ForwardOperator::Downsample { factor } => {
                if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
                    return Err(contract(alloc::format!(
                        "downsample factor {factor} must divide the image shape {height}x{width}"
                    )));
                }
                Ok((channels, height / factor, width / factor))
            }
            _ => Ok((channels, height, width)),
        }
    }
}

/// Draws the masked block for an image of the given size.
pub fn mask_region<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> MaskRegion {
    let (mh, mw) = (height.div_ceil(2), width.div_ceil(2));
    MaskRegion {
        top: rng.random_range(0..=height - mh),
        left: rng.random_range(0..=width - mw),
        height: mh,
        width: mw,
    }
}

pub fn apply_mask(x: &Image, region: MaskRegion) -> Image {
    let mut y = x.clone();
    for c in 0..x.channels {
        for r in region.top..region.top + region.height {
            for q in region.left..region.left + region.width {
                *y.at_mut(c, r, q) = 0.0;
            }
        }
    }
    y
}

pub fn apply_operator<R: Rng + ?Sized>(op: &ForwardOperator, x: &Image, rng: &mut R) -> Result<Image> {
    let (c, h, w) = op.output_shape(x.channels, x.height, x.width)?;
    match *op {
        ForwardOperator::Mask => Ok(apply_mask(x, mask_region(x.height, x.width, rng))),
        ForwardOperator::Downsample { factor } => {
            let mut y = Image::zeros(c, h, w);
            let norm = (factor * factor) as f64;
            for ch in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += x.at(ch, r * factor + dy, q * factor + dx);
                            }
                        }
                        *y.at_mut(ch, r, q) = acc / norm;
                    }
                }
            }
            Ok(y)
        }
        ForwardOperator::EdgeMagnitude => {
            let mut y = Image::zeros(c, h, w);
            for ch in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        let v = x.at(ch, r, q);
                        let gy = if r + 1 < h { x.at(ch, r + 1, q) - v } else { 0.0 };
                        let gx = if q + 1 < w { x.at(ch, r, q + 1) - v } else { 0.0 };
                        *y.at_mut(ch, r, q) = hypot(gy, gx);
                    }
                }
            }
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn independent_pair_has_small_cross_correlation() {
        let d = Dataset::JointGaussian(GaussianJoint::standard_pair(0.0).unwrap());
        let n = 20_000;
        let rows = sample_dataset(&d, n, &mut stream(1, 0)).unwrap();
        let c: f64 = rows.chunks(2).map(|r| r[0] * r[1]).sum::<f64>() / n as f64;
        assert!(c.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn symmetric_mixture_has_zero_mean() {
        let d = Dataset::symmetric_gmm2d(2.0, 0.5);
        let n = 20_000;
        let rows = sample_dataset(&d, n, &mut stream(2, 0)).unwrap();
        let m0 = rows.chunks(2).map(|r| r[0]).sum::<f64>() / n as f64;
        // Per-sample variance is 4 + 0.25.
        assert!(m0.abs() < 4.0 * (4.25 / n as f64).sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        for d in [
            Dataset::symmetric_gmm2d(1.0, 0.3),
            Dataset::ToyImages {
                pattern: ToyPattern::Blob,
                height: 8,
                width: 8,
            },
        ] {
            let a = sample_dataset(&d, 5, &mut stream(7, 1)).unwrap();
            let b = sample_dataset(&d, 5, &mut stream(7, 1)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn toy_images_stay_in_unit_range() {
        for pattern in [ToyPattern::Checkerboard, ToyPattern::Blob, ToyPattern::Gradient] {
            let d = Dataset::ToyImages {
                pattern,
                height: 8,
                width: 8,
            };
            let rows = sample_dataset(&d, 20, &mut stream(3, 0)).unwrap();
            assert!(rows.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let d = Dataset::Gaussian {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 2.0, 2.0, 1.0],
        };
        assert!(sample_dataset(&d, 1, &mut stream(0, 0)).is_err());
        assert!(sample_dataset(&Dataset::symmetric_gmm2d(1.0, 1.0), 0, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn mask_zeroes_a_quarter() {
        let x = Image::filled(1, 8, 8, 0.7);
        let mut rng = stream(4, 0);
        for _ in 0..20 {
            let y = apply_operator(&ForwardOperator::Mask, &x, &mut rng).unwrap();
            let zeros = y.data.iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 16);
            assert!(y.data.iter().all(|v| *v == 0.0 || *v == 0.7));
        }
        // Odd sizes round the block up by at most one row and column.
        let r = mask_region(7, 7, &mut rng);
        assert_eq!((r.height, r.width), (4, 4));
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let x = Image::filled(1, 8, 8, 1.0);
        let a = apply_operator(&ForwardOperator::Mask, &x, &mut stream(9, 0)).unwrap();
        let b = apply_operator(&ForwardOperator::Mask, &x, &mut stream(9, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn downsample_averages_blocks() {
        let x = Image::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
        let y = apply_operator(&ForwardOperator::Downsample { factor: 2 }, &x, &mut stream(0, 0)).unwrap();
        assert_eq!(y.data, vec![4.0]);
        let z = Image::zeros(1, 6, 6);
        assert!(apply_operator(&ForwardOperator::Downsample { factor: 4 }, &z, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn edges_of_constant_image_vanish() {
        let x = Image::filled(2, 5, 4, 0.3);
        let y = apply_operator(&ForwardOperator::EdgeMagnitude, &x, &mut stream(0, 0)).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
        let ramp = Image::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let e = apply_operator(&ForwardOperator::EdgeMagnitude, &ramp, &mut stream(0, 0)).unwrap();
        assert_eq!(e.data, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn operator_outputs_match_declared_shapes() {
        let x = Image::zeros(1, 8, 8);
        for op in [
            ForwardOperator::Mask,
            ForwardOperator::Downsample { factor: 4 },
            ForwardOperator::EdgeMagnitude,
        ] {
            let y = apply_operator(&op, &x, &mut stream(0, 0)).unwrap();
            assert_eq!((y.channels, y.height, y.width), op.output_shape(1, 8, 8).unwrap());
        }
    }
}
