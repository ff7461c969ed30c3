use nudiff_core::rng::StreamRng;
use nudiff_core::score::{
    train, train_unconditional, AnalyticGaussian, Activation, KernelScaled, Mlp, Optimizer,
    Preconditioning, SampleSource, ScoreModel, TrainConfig, UnconditionalSource, Weighting,
};
use nudiff_core::sde::{NonUniformSde, SdeSpec};
use nudiff_core::{rng, Result};

struct StdNormal;

impl SampleSource for StdNormal {
    fn dim(&self) -> usize {
        1
    }
    fn sample(&mut self, n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        Ok((0..n).map(|_| rng::normal(rng)).collect())
    }
}

fn config(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: Optimizer::Adam {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        batch_size: 128,
        iterations,
        ema_rate: 0.995,
        seed,
        weighting: Weighting::LikelihoodMatrix,
        preconditioning: Preconditioning::InverseKernelStd,
        final_lr_fraction: 0.05,
    }
}

fn relative_l2(model: &dyn ScoreModel, oracle: &dyn ScoreModel) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=30 {
        for j in 0..=9 {
            let x = -3.0 + 0.2 * i as f64;
            let t = 0.1 + 0.1 * j as f64;
            let (mut a, mut b) = ([0.0], [0.0]);
            model.score_batch(&[x], &[], &[t], &mut a).unwrap();
            oracle.score_batch(&[x], &[], &[t], &mut b).unwrap();
            num += (a[0] - b[0]).powi(2);
            den += b[0].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn learns_standard_normal_score() {
    let sde = NonUniformSde::uniform(1, SdeSpec::vp_beta_linear(0.1, 20.0).unwrap()).unwrap();
    let init = Mlp::init(1, 0, &[64, 64], Activation::Silu, &mut rng::stream(1, 9)).unwrap();
    let out = train_unconditional(init, &sde, StdNormal, &config(5000, 4)).unwrap();
    let oracle = AnalyticGaussian::new(vec![0.0], vec![1.0], sde.clone()).unwrap();
    let learned = KernelScaled::new(out.ema, sde).unwrap();
    let err = relative_l2(&learned, &oracle);
    println!("relative L2 error {err}");
    assert!(err < 0.10, "relative L2 error {err}");
}

#[test]
fn zero_iterations_return_initial_weights() {
    let sde = NonUniformSde::uniform(1, SdeSpec::ve(0.1, 10.0).unwrap()).unwrap();
    let init = Mlp::init(1, 0, &[8], Activation::Tanh, &mut rng::stream(2, 0)).unwrap();
    let out = train_unconditional(init.clone(), &sde, StdNormal, &config(0, 1)).unwrap();
    assert_eq!(out.model.params(), init.params());
    assert_eq!(out.ema.params(), init.params());
    assert!(out.trace.is_empty());
}

#[test]
fn identical_seeds_give_identical_traces() {
    let sde = NonUniformSde::uniform(1, SdeSpec::ve(0.1, 10.0).unwrap()).unwrap();
    let init = Mlp::init(1, 0, &[16], Activation::Silu, &mut rng::stream(3, 0)).unwrap();
    let run = || {
        let mut src = UnconditionalSource::new(sde.clone(), StdNormal, Weighting::LikelihoodMatrix);
        train(init.clone(), &mut src, &config(200, 8)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.ema.params(), b.ema.params());
}

#[test]
fn divergence_reports_iteration() {
    let sde = NonUniformSde::uniform(1, SdeSpec::ve(0.1, 10.0).unwrap()).unwrap();
    let init = Mlp::init(1, 0, &[8], Activation::Identity, &mut rng::stream(3, 0)).unwrap();
    let mut cfg = config(500, 1);
    cfg.optimizer = Optimizer::Sgd { lr: 1e6 };
    cfg.preconditioning = Preconditioning::None;
    let err = train_unconditional(init, &sde, StdNormal, &cfg).unwrap_err();
    assert!(matches!(err, nudiff_core::Error::Diverged { .. }), "{err:?}");
}
