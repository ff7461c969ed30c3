use nudiff_core::linalg::{mat_mul, transpose};
use nudiff_core::multiscale::{
    build_schedule, design_group_sdes, multiscale_dsm_batch_coeffs, multiscale_sample, prefix_len, CostProfile,
    MultiscaleModel,
};
use nudiff_core::rng::{normal, stream};
use nudiff_core::score::{AnalyticGaussian, Activation, Mlp, ScoreModel, Weighting};
use nudiff_core::synthdata::Dataset;
use nudiff_core::wavelet::{image_to_coefficients, Group, PyramidLayout};
use nudiff_core::Image;
use proptest::prelude::*;

fn haar_matrix(layout: &PyramidLayout) -> Vec<f64> {
    let n = layout.total();
    let mut w = vec![0.0; n * n];
    for k in 0..n {
        let mut basis = Image::zeros(layout.channels, layout.height, layout.width);
        basis.data[k] = 1.0;
        for (i, v) in image_to_coefficients(&basis, layout).unwrap().into_iter().enumerate() {
            w[i * n + k] = v;
        }
    }
    w
}

/// Exact per-range scores of a Gaussian image law in coefficient space.
fn analytic_model(mean: &[f64], cov: &[f64], n: usize, h: usize, w: usize) -> MultiscaleModel {
    let layout = PyramidLayout::new(1, h, w, n).unwrap();
    let d = layout.total();
    let wm = haar_matrix(&layout);
    let mean_c = mat_mul(&wm, mean, d, d, 1);
    let cov_c = mat_mul(&mat_mul(&wm, cov, d, d, d), &transpose(&wm, d, d), d, d, d);
    let schedule = build_schedule(n, 1e-5).unwrap();
    let sde = design_group_sdes(&schedule, &layout, 1e6, 4.3e-5).unwrap();
    let full = AnalyticGaussian::new(mean_c, cov_c, sde.clone()).unwrap();
    let models = (1..=n + 1)
        .map(|i| Box::new(full.prefix(prefix_len(&layout, i).unwrap()).unwrap()) as Box<dyn ScoreModel>)
        .collect();
    MultiscaleModel::new(schedule, layout, sde, models).unwrap()
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn cascade_reproduces_gaussian_image_moments() {
    let (h, w) = (4, 4);
    let Dataset::Gaussian { cov, .. } = Dataset::smooth_gaussian_images(h, w, 1.5, 1.0) else {
        unreachable!()
    };
    let mean: Vec<f64> = (0..16).map(|i| 0.5 + 0.1 * (i % 4) as f64).collect();
    let model = analytic_model(&mean, &cov, 1, h, w);
    let n = 5000;
    let out = multiscale_sample(&model, &[128, 128], n, false, &mut stream(1, 0)).unwrap();
    assert_eq!(out.images.len(), n);

    let mut m = [0.0; 16];
    for img in &out.images {
        for (a, b) in m.iter_mut().zip(&img.data) {
            *a += b / n as f64;
        }
    }
    let mut c = vec![0.0; 256];
    for img in &out.images {
        for i in 0..16 {
            for j in 0..16 {
                c[i * 16 + j] += (img.data[i] - m[i]) * (img.data[j] - m[j]) / n as f64;
            }
        }
    }
    let mean_gap: Vec<f64> = m.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let cov_gap: Vec<f64> = c.iter().zip(&cov).map(|(a, b)| a - b).collect();
    assert!(frobenius(&mean_gap) < 0.1 * frobenius(&mean), "mean gap {}", frobenius(&mean_gap));
    assert!(frobenius(&cov_gap) < 0.1 * frobenius(&cov), "cov gap {}", frobenius(&cov_gap));
}

#[test]
fn near_noiseless_cascade_keeps_its_prior_draw_statistics() {
    // With snr_min huge the groups barely diffuse; zero scores leave the
    // prior draws almost untouched.
    let (h, w, n) = (4, 4, 2);
    let layout = PyramidLayout::new(1, h, w, n).unwrap();
    let schedule = build_schedule(n, 1e-5).unwrap();
    let sde = design_group_sdes(&schedule, &layout, 1e12, 1e10).unwrap();
    let models = (1..=n + 1)
        .map(|i| {
            let len = prefix_len(&layout, i).unwrap();
            Box::new(Mlp::zeros(len, 0, &[4], Activation::Tanh).unwrap()) as Box<dyn ScoreModel>
        })
        .collect();
    let model = MultiscaleModel::new(schedule, layout, sde.clone(), models).unwrap();
    let samples = 4000;
    let out = multiscale_sample(&model, &[32, 32, 32], samples, false, &mut stream(2, 0)).unwrap();
    let prior = sde.prior_std_vector();
    let d = 16;
    for k in 0..d {
        let col: Vec<f64> = out.coefficients.iter().skip(k).step_by(d).copied().collect();
        let var = col.iter().map(|v| v * v).sum::<f64>() / samples as f64;
        assert!((var.sqrt() / prior[k] - 1.0).abs() < 0.05, "coefficient {k}: {}", var.sqrt());
    }
}

#[test]
fn desk_scale_three_level_cost_ratio() {
    // Prefixes 64, 16, 4, 1 at 64 steps each against 4 * 64 steps on 64 pixels.
    let p = CostProfile::for_image(1, 8, 8, 3, &[64; 4]).unwrap();
    assert_eq!(p.per_range, vec![64 * 64, 16 * 64, 4 * 64, 64]);
    assert_eq!(p.total, 85 * 64);
    assert_eq!(p.uniform_baseline, 4 * 64 * 64);
    assert!((p.ratio - 256.0 / 85.0).abs() < 1e-15);
}

#[test]
fn scalar_weighting_factorises_out_of_the_loss() {
    // At a single time a uniform group SDE has G = g I, so the likelihood
    // weighted loss is g^2 times the identity weighted one.
    let layout = PyramidLayout::new(1, 4, 4, 1).unwrap();
    let schedule = build_schedule(1, 1e-5).unwrap();
    let sde = design_group_sdes(&schedule, &layout, 1e4, 1e-2).unwrap();
    let coeffs: Vec<Vec<f64>> = (0..50)
        .map(|i| {
            let mut r = stream(3, i);
            (0..16).map(|_| normal(&mut r)).collect()
        })
        .collect();
    // Range 2 only sees a_1, a single group.
    let a = multiscale_dsm_batch_coeffs(&schedule, &layout, &sde, 2, &coeffs, Weighting::Identity, &mut stream(3, 99)).unwrap();
    let b = multiscale_dsm_batch_coeffs(&schedule, &layout, &sde, 2, &coeffs, Weighting::LikelihoodMatrix, &mut stream(3, 99)).unwrap();
    let zero = Mlp::zeros(4, 0, &[3], Activation::Silu).unwrap();
    let (la, lb) = (a.loss(&zero).unwrap(), b.loss(&zero).unwrap());
    let mut weighted = 0.0;
    let mut plain = 0.0;
    for r in 0..a.rows() {
        let g2 = b.weight[r * 4];
        let sq: f64 = a.target[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
        weighted += g2 * sq;
        plain += sq;
    }
    assert!((lb / la - weighted / plain).abs() < 1e-12);
    let t = 0.8;
    let g = sde.diffusion_vector(t).unwrap();
    let a = nudiff_core::score::DsmBatch::sample_at(&sde.prefix(4).unwrap(), &vec![0.0; 200], &[], 0, Weighting::Identity, &[t; 50], &mut stream(4, 0)).unwrap();
    let b = nudiff_core::score::DsmBatch::sample_at(&sde.prefix(4).unwrap(), &vec![0.0; 200], &[], 0, Weighting::LikelihoodMatrix, &[t; 50], &mut stream(4, 0)).unwrap();
    let ratio = b.loss(&zero).unwrap() / a.loss(&zero).unwrap();
    assert!((ratio - g[0] * g[0]).abs() < 1e-12 * ratio);
}

#[test]
fn zero_model_loss_matches_kernel_score_energy() {
    // s = 0 on identical images: E loss = d g^2 / (2 s^2) at a fixed time.
    let layout = PyramidLayout::new(1, 4, 4, 1).unwrap();
    let schedule = build_schedule(1, 1e-5).unwrap();
    let sde = design_group_sdes(&schedule, &layout, 1e4, 1e-2).unwrap();
    let t = 0.3;
    let rows = 20_000;
    let x0: Vec<f64> = (0..rows * 16).map(|i| (i % 16) as f64 * 0.1).collect();
    let b = nudiff_core::score::DsmBatch::sample_at(&sde, &x0, &[], 0, Weighting::LikelihoodMatrix, &vec![t; rows], &mut stream(5, 0)).unwrap();
    let zero = Mlp::zeros(16, 0, &[3], Activation::Silu).unwrap();
    let (_, s) = sde.kernel_vectors(t).unwrap();
    let g = sde.diffusion_vector(t).unwrap();
    let expected: f64 = (0..16).map(|i| 0.5 * g[i] * g[i] / (s[i] * s[i])).sum();
    let got = b.loss(&zero).unwrap();
    // Each coordinate term is chi-square(1) scaled; 20k rows give ~1% error.
    assert!((got / expected - 1.0).abs() < 0.03, "{got} vs {expected}");
}

#[test]
fn diffused_gaussian_score_beats_perturbations_on_paired_batches() {
    let (h, w) = (4, 4);
    let Dataset::Gaussian { cov, .. } = Dataset::smooth_gaussian_images(h, w, 1.5, 1.0) else {
        unreachable!()
    };
    let model = analytic_model(&[0.0; 16], &cov, 1, h, w);
    let chol = nudiff_core::linalg::Cholesky::factor(&cov, 16).unwrap();
    let mut rng = stream(6, 0);
    let coeffs: Vec<Vec<f64>> = (0..20_000)
        .map(|_| {
            let z: Vec<f64> = (0..16).map(|_| normal(&mut rng)).collect();
            let mut x = vec![0.0; 16];
            chol.mul_lower(&z, &mut x);
            let img = Image::new(1, h, w, x).unwrap();
            image_to_coefficients(&img, &model.layout).unwrap()
        })
        .collect();
    for index in 1..=2 {
        let batch = multiscale_dsm_batch_coeffs(&model.schedule, &model.layout, &model.sde, index, &coeffs, Weighting::LikelihoodMatrix, &mut stream(6, index as u64)).unwrap();
        let exact = batch.loss(&*model.scale_models[index - 1]).unwrap();
        let len = prefix_len(&model.layout, index).unwrap();
        for shift in [0.05, -0.1, 0.2] {
            let mean = vec![shift; 16];
            let wrong = analytic_model(&mean, &cov, 1, h, w);
            let loss = batch.loss(&*wrong.scale_models[index - 1]).unwrap();
            assert!(exact < loss, "range {index} len {len} shift {shift}: {exact} !< {loss}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranges_partition_the_unit_interval(n in 1usize..=6, eps_frac in 1e-6f64..0.9) {
        let eps = eps_frac / (n as f64 + 1.0);
        let s = build_schedule(n, eps).unwrap();
        let ranges = s.ranges();
        prop_assert_eq!(ranges.len(), n + 1);
        prop_assert_eq!(ranges[0].0, eps);
        prop_assert_eq!(ranges[n].1, 1.0);
        for w in ranges.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
            prop_assert!(w[0].0 < w[0].1);
        }
        let mut last = 0.0;
        for i in 1..=n {
            let t = s.terminal_time(Group::Detail(i));
            prop_assert!(t > last);
            prop_assert!((t - i as f64 / (n as f64 + 1.0)).abs() < 1e-15);
            last = t;
        }
        prop_assert_eq!(s.terminal_time(Group::Approx), 1.0);
    }

    #[test]
    fn every_group_reaches_the_snr_endpoints(n in 1usize..=3, lmax in 1.0f64..8.0, lmin in -6.0f64..0.0) {
        let (snr_max, snr_min) = (10f64.powf(lmax), 10f64.powf(lmin));
        let layout = PyramidLayout::new(1, 8, 8, n).unwrap();
        let schedule = build_schedule(n, 1e-5).unwrap();
        let sde = design_group_sdes(&schedule, &layout, snr_max, snr_min).unwrap();
        for (range, spec) in sde.components() {
            prop_assert!(!range.is_empty());
            let hi = spec.snr(spec.epsilon()).unwrap();
            let lo = spec.snr(spec.terminal_time()).unwrap();
            prop_assert!((hi / snr_max - 1.0).abs() < 1e-9);
            prop_assert!((lo / snr_min - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_ratio_exceeds_one_with_levels(n in 1usize..=3, steps in 1usize..200, c in 1usize..=3) {
        let p = CostProfile::for_image(c, 8, 8, n, &vec![steps; n + 1]).unwrap();
        prop_assert!(p.ratio > 1.0);
        prop_assert!(p.total < p.uniform_baseline);
        let flat = CostProfile::for_image(c, 8, 8, 0, &[steps * (n + 1)]).unwrap();
        prop_assert_eq!(flat.ratio, 1.0);
    }
}
