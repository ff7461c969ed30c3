//! Multi-level orthonormal 2D Haar transform.
//!
//! One level maps each 2x2 block `[[p, q], [r, s]]` to
//!
//! ```text
//! approx     = (p + q + r + s) / 2
//! horizontal = (p + q - r - s) / 2
//! vertical   = (p - q + r - s) / 2
//! diagonal   = (p - q - r + s) / 2
//! ```
//!
//! which is orthonormal, so coefficient energy equals image energy. The
//! recursion continues on the approximation band. Channels are
//! transformed independently.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{check_len, contract, Result};
use crate::image::Image;

/// The three detail subbands of one level, each `channels x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
    pub diagonal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaarPyramid {
    pub levels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `a_n`, shape `channels x height/2^n x width/2^n`.
    pub approx: Vec<f64>,
    /// `details[i - 1]` holds `d_i`, shape `channels x height/2^i x width/2^i`.
    pub details: Vec<DetailBands>,
}

fn check_shape(channels: usize, height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(contract("Haar transform needs at least one level"));
    }
    let block = 1usize << levels;
    if channels == 0 || height == 0 || width == 0 || !height.is_multiple_of(block) || !width.is_multiple_of(block) {
        return Err(contract(alloc::format!(
            "image of shape {height}x{width} must have both sides divisible by 2^{levels} = {block}"
        )));
    }
    Ok(())
}

pub fn haar_decompose(image: &Image, levels: usize) -> Result<HaarPyramid> {
    let (c, h0, w0) = (image.channels, image.height, image.width);
    check_shape(c, h0, w0, levels)?;
    let mut current = image.data.clone();
    let (mut h, mut w) = (h0, w0);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (hh, hw) = (h / 2, w / 2);
        let n = c * hh * hw;
        let mut a = vec![0.0; n];
        let mut bands = DetailBands {
            horizontal: vec![0.0; n],
            vertical: vec![0.0; n],
            diagonal: vec![0.0; n],
        };
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..hw {
                    let at = |yy: usize, xx: usize| current[(ch * h + yy) * w + xx];
                    let p = at(2 * y, 2 * x);
                    let q = at(2 * y, 2 * x + 1);
                    let r = at(2 * y + 1, 2 * x);
                    let s = at(2 * y + 1, 2 * x + 1);
                    let k = (ch * hh + y) * hw + x;
                    a[k] = 0.5 * (p + q + r + s);
                    bands.horizontal[k] = 0.5 * (p + q - r - s);
                    bands.vertical[k] = 0.5 * (p - q + r - s);
                    bands.diagonal[k] = 0.5 * (p - q - r + s);
                }
            }
        }
        details.push(bands);
        current = a;
        h = hh;
        w = hw;
    }
    Ok(HaarPyramid {
        levels,
        channels: c,
        height: h0,
        width: w0,
        approx: current,
        details,
    })
}

pub fn haar_reconstruct(pyramid: &HaarPyramid) -> Result<Image> {
    let HaarPyramid {
        levels,
        channels: c,
        height,
        width,
        ..
    } = *pyramid;
    check_shape(c, height, width, levels)?;
    check_len("pyramid detail levels", levels, pyramid.details.len())?;
    check_len(
        "approximation band",
        c * (height >> levels) * (width >> levels),
        pyramid.approx.len(),
    )?;
    let mut current = pyramid.approx.clone();
    for level in (1..=levels).rev() {
        let (hh, hw) = (height >> level, width >> level);
        let (h, w) = (2 * hh, 2 * hw);
        let bands = &pyramid.details[level - 1];
        let n = c * hh * hw;
        for band in [&bands.horizontal, &bands.vertical, &bands.diagonal] {
            check_len("detail band", n, band.len())?;
        }
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..hw {
                    let k = (ch * hh + y) * hw + x;
                    let (a, hz, v, d) = (
                        current[k],
                        bands.horizontal[k],
                        bands.vertical[k],
                        bands.diagonal[k],
                    );
                    out[(ch * h + 2 * y) * w + 2 * x] = 0.5 * (a + hz + v + d);
                    out[(ch * h + 2 * y) * w + 2 * x + 1] = 0.5 * (a + hz - v - d);
                    out[(ch * h + 2 * y + 1) * w + 2 * x] = 0.5 * (a - hz + v - d);
                    out[(ch * h + 2 * y + 1) * w + 2 * x + 1] = 0.5 * (a - hz - v + d);
                }
            }
        }
        current = out;
    }
    Image::new(c, height, width, current)
}

/// A coefficient group: the approximation `a_n` or the detail level `d_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Approx,
    Detail(usize),
}

/// Index ranges of each group in the flattened coefficient vector, ordered
/// `[a_n, d_n, ..., d_1]` (the cascade's generation order). Within `d_i` the
/// subbands are stored horizontal, vertical, diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLayout {
    pub levels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub groups: Vec<(Group, Range<usize>)>,
}

impl PyramidLayout {
    pub fn new(channels: usize, height: usize, width: usize, levels: usize) -> Result<Self> {
        check_shape(channels, height, width, levels)?;
        let mut groups = Vec::with_capacity(levels + 1);
        let approx = channels * (height >> levels) * (width >> levels);
        groups.push((Group::Approx, 0..approx));
        let mut next = approx;
        for level in (1..=levels).rev() {
            let len = 3 * channels * (height >> level) * (width >> level);
            groups.push((Group::Detail(level), next..next + len));
            next += len;
        }
        Ok(Self {
            levels,
            channels,
            height,
            width,
            groups,
        })
    }

    pub fn total(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn range(&self, group: Group) -> Option<Range<usize>> {
        self.groups
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, r)| r.clone())
    }
}

pub fn pyramid_flatten(pyramid: &HaarPyramid) -> (Vec<f64>, PyramidLayout) {
    let mut out = Vec::with_capacity(pyramid.channels * pyramid.height * pyramid.width);
    let mut groups = Vec::with_capacity(pyramid.levels + 1);
    out.extend_from_slice(&pyramid.approx);
    groups.push((Group::Approx, 0..out.len()));
    for (i, bands) in pyramid.details.iter().enumerate().rev() {
        let start = out.len();
        out.extend_from_slice(&bands.horizontal);
        out.extend_from_slice(&bands.vertical);
        out.extend_from_slice(&bands.diagonal);
        groups.push((Group::Detail(i + 1), start..out.len()));
    }
    let layout = PyramidLayout {
        levels: pyramid.levels,
        channels: pyramid.channels,
        height: pyramid.height,
        width: pyramid.width,
        groups,
    };
    (out, layout)
}

pub fn pyramid_unflatten(coeffs: &[f64], layout: &PyramidLayout) -> Result<HaarPyramid> {
    check_len("flattened pyramid", layout.total(), coeffs.len())?;
    let approx = layout
        .range(Group::Approx)
        .ok_or_else(|| contract("layout has no approximation group"))?;
    let mut details = Vec::with_capacity(layout.levels);
    for level in 1..=layout.levels {
        let r = layout
            .range(Group::Detail(level))
            .ok_or_else(|| contract("layout is missing a detail level"))?;
        let band = r.len() / 3;
        let s = &coeffs[r];
        details.push(DetailBands {
            horizontal: s[..band].to_vec(),
            vertical: s[band..2 * band].to_vec(),
            diagonal: s[2 * band..].to_vec(),
        });
    }
    Ok(HaarPyramid {
        levels: layout.levels,
        channels: layout.channels,
        height: layout.height,
        width: layout.width,
        approx: coeffs[approx].to_vec(),
        details,
    })
}

/// Image straight to its flattened coefficient vector.
pub fn image_to_coefficients(image: &Image, layout: &PyramidLayout) -> Result<Vec<f64>> {
    if image.channels != layout.channels || image.height != layout.height || image.width != layout.width {
        return Err(contract("image shape does not match the pyramid layout"));
    }
    Ok(pyramid_flatten(&haar_decompose(image, layout.levels)?).0)
}

pub fn coefficients_to_image(coeffs: &[f64], layout: &PyramidLayout) -> Result<Image> {
    haar_reconstruct(&pyramid_unflatten(coeffs, layout)?)
}

/// Orthonormal analysis matrix of a layout: row `i` maps an image to
/// coefficient `i`, so `W cov W^T` is the coefficient covariance.
pub fn analysis_matrix(layout: &PyramidLayout) -> Result<Vec<f64>> {
    let n = layout.total();
    let mut w = vec![0.0; n * n];
    for k in 0..n {
        let mut basis = Image::zeros(layout.channels, layout.height, layout.width);
        basis.data[k] = 1.0;
        let col = image_to_coefficients(&basis, layout)?;
        for (i, v) in col.iter().enumerate() {
            w[i * n + k] = *v;
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};
    use proptest::prelude::*;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut r = stream(seed, 0);
        let mut img = Image::zeros(c, h, w);
        rng::fill_normal(&mut r, &mut img.data);
        img
    }

    #[test]
    fn constant_image_has_only_approximation() {
        for n in 1..=3 {
            let img = Image::filled(1, 8, 8, 1.5);
            let p = haar_decompose(&img, n).unwrap();
            let want = (1u32 << n) as f64 * 1.5;
            assert!(p.approx.iter().all(|&a| (a - want).abs() < 1e-12));
            for d in &p.details {
                for band in [&d.horizontal, &d.vertical, &d.diagonal] {
                    assert!(band.iter().all(|&v| v.abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn two_by_two_hand_computation() {
        let img = Image::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap();
        let p = haar_decompose(&img, 1).unwrap();
        assert_eq!(p.approx, vec![8.0]);
        assert_eq!(p.details[0].vertical, vec![-2.0]);
        assert_eq!(p.details[0].horizontal, vec![-4.0]);
        assert_eq!(p.details[0].diagonal, vec![0.0]);
    }

    #[test]
    fn non_divisible_shape_is_rejected() {
        let img = Image::zeros(1, 12, 8);
        let err = haar_decompose(&img, 3).unwrap_err();
        assert!(alloc::format!("{err}").contains("divisible by 2^3"));
    }

    #[test]
    fn zero_and_constant_pyramids_reconstruct() {
        let layout = PyramidLayout::new(1, 8, 8, 2).unwrap();
        let zero = coefficients_to_image(&vec![0.0; 64], &layout).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let mut coeffs = vec![0.0; 64];
        coeffs[..4].iter_mut().for_each(|v| *v = 4.0 * 0.25);
        let img = coefficients_to_image(&coeffs, &layout).unwrap();
        assert!(img.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layout_group_sizes() {
        let l = PyramidLayout::new(1, 2, 2, 1).unwrap();
        assert_eq!(l.groups, vec![(Group::Approx, 0..1), (Group::Detail(1), 1..4)]);
        let l = PyramidLayout::new(1, 8, 8, 3).unwrap();
        let sizes: Vec<usize> = l.groups.iter().map(|(_, r)| r.len()).collect();
        assert_eq!(sizes, vec![1, 3, 12, 48]);
    }

    #[test]
    fn multichannel_transforms_channels_independently() {
        let img = random_image(3, 4, 4, 9);
        let p = haar_decompose(&img, 2).unwrap();
        for ch in 0..3 {
            let single = Image::new(1, 4, 4, img.data[ch * 16..(ch + 1) * 16].to_vec()).unwrap();
            let q = haar_decompose(&single, 2).unwrap();
            assert_eq!(p.approx[ch], q.approx[0]);
            assert_eq!(&p.details[0].diagonal[ch * 4..(ch + 1) * 4], &q.details[0].diagonal[..]);
        }
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(seed in 0u64..10_000, n in 1usize..=3, c in 1usize..=2) {
            let img = random_image(c, 16, 8, seed);
            let p = haar_decompose(&img, n).unwrap();
            let (flat, layout) = pyramid_flatten(&p);
            let energy: f64 = img.data.iter().map(|v| v * v).sum();
            let coeff_energy: f64 = flat.iter().map(|v| v * v).sum();
            prop_assert!((energy - coeff_energy).abs() <= 1e-10 * energy);
            let back = haar_reconstruct(&pyramid_unflatten(&flat, &layout).unwrap()).unwrap();
            let err = back.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-10);
        }

        #[test]
        fn linearity(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_image(1, 8, 8, seed);
            let y = random_image(1, 8, 8, seed + 1);
            let mut z = Image::zeros(1, 8, 8);
            for i in 0..64 { z.data[i] = a * x.data[i] + b * y.data[i]; }
            let layout = PyramidLayout::new(1, 8, 8, 3).unwrap();
            let cx = image_to_coefficients(&x, &layout).unwrap();
            let cy = image_to_coefficients(&y, &layout).unwrap();
            let cz = image_to_coefficients(&z, &layout).unwrap();
            for i in 0..64 {
                prop_assert!((cz[i] - (a * cx[i] + b * cy[i])).abs() < 1e-12);
            }
        }
    }
}
