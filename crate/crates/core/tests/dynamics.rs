use nudiff_core::rng::stream;
use nudiff_core::score::{Activation, AnalyticGaussian, Mlp};
use nudiff_core::sde::{diffuse, integrate_reverse, tweedie_denoise, NonUniformSde, Scheme, SdeSpec, TimeGrid};

fn ve() -> SdeSpec {
    SdeSpec::ve(0.01, 50.0).unwrap()
}

#[test]
fn reverse_sde_recovers_standard_normal() {
    let sde = NonUniformSde::uniform(1, ve()).unwrap();
    let model = AnalyticGaussian::new(vec![0.0], vec![1.0], sde.clone()).unwrap();
    let grid = TimeGrid::uniform(1.0, ve().epsilon(), 256, Scheme::EulerMaruyama).unwrap();
    let mut rng = stream(1, 0);
    let start = sde.sample_prior(10_000, &mut rng);
    let x = integrate_reverse(&sde, &model, &start, &grid, &mut rng).unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((std - 1.0).abs() < 0.05, "std {std}");
}

#[test]
fn probability_flow_follows_the_linear_ode_solution() {
    // Target N(0, 1) under VE: dx/dt = x g^2 / (2 (1 + s^2)), so
    // x(t) is proportional to sqrt(1 + s(t)^2).
    let spec = SdeSpec::ve(0.01, 5.0).unwrap();
    let sde = NonUniformSde::uniform(1, spec).unwrap();
    let model = AnalyticGaussian::new(vec![0.0], vec![1.0], sde.clone()).unwrap();
    let start = [-2.0, 0.3, 1.7];
    let var = |t: f64| 1.0 + spec.kernel(t).unwrap().var();
    let factor = (var(spec.epsilon()) / var(1.0)).sqrt();
    let mut last = f64::INFINITY;
    for steps in [250, 500, 1000] {
        let grid = TimeGrid::uniform(1.0, spec.epsilon(), steps, Scheme::ProbabilityFlowEuler).unwrap();
        let x = integrate_reverse(&sde, &model, &start, &grid, &mut stream(0, 0)).unwrap();
        let err = x
            .iter()
            .zip(&start)
            .map(|(a, b)| (a - b * factor).abs())
            .fold(0.0, f64::max);
        assert!(err < 20.0 / steps as f64, "{steps} steps: {err}");
        assert!(err < last);
        last = err;
    }
}

#[test]
fn components_diffuse_with_their_own_kernels() {
    let a = SdeSpec::ve(0.01, 5.0).unwrap();
    let b = SdeSpec::ve(0.01, 50.0).unwrap();
    let sde = NonUniformSde::new(3, vec![(0..1, a), (1..3, b)]).unwrap();
    let n = 100_000;
    let t = 0.6;
    let x = diffuse(&sde, &vec![0.0; 3 * n], t, &mut stream(2, 0)).unwrap();
    let want = [a.kernel(t).unwrap().std, b.kernel(t).unwrap().std, b.kernel(t).unwrap().std];
    for k in 0..3 {
        let var = x.iter().skip(k).step_by(3).map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var.sqrt() / want[k] - 1.0).abs() < 0.01, "component {k}");
    }
}

#[test]
fn tweedie_with_zero_score_rescales_by_the_mean() {
    let vp = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
    let sde = NonUniformSde::uniform(2, vp).unwrap();
    let zero = Mlp::zeros(2, 0, &[3], Activation::Tanh).unwrap();
    let t = 0.4;
    let m = vp.kernel(t).unwrap().mean_scale;
    let x = [0.8, -1.1];
    let got = tweedie_denoise(&sde, &zero, &x, t).unwrap();
    for i in 0..2 {
        assert!((got[i] - x[i] / m).abs() < 1e-14);
    }
}

#[test]
fn tweedie_with_narrow_prior_returns_its_centre() {
    let vp = SdeSpec::vp_beta_linear(0.1, 20.0).unwrap();
    let sde = NonUniformSde::uniform(1, vp).unwrap();
    let x0 = 0.7;
    let narrow = AnalyticGaussian::new(vec![x0], vec![1e-10], sde.clone()).unwrap();
    let t = 0.3;
    let m = vp.kernel(t).unwrap().mean_scale;
    for offset in [-0.5, 0.0, 0.5] {
        let got = tweedie_denoise(&sde, &narrow, &[m * x0 + offset], t).unwrap()[0];
        // Posterior shrinks onto x0 with weight 1e-10 m^2 / (1e-10 m^2 + s^2).
        assert!((got - x0).abs() < 1e-8, "{got}");
    }
}
