//! Score models of a run: one slot per trained network, its inference
//! wrapper, and the analytic stand-ins for Gaussian data.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use nudiff_core::conditional::{AnalyticConditional, ConditionalSource, EstimatorKind};
use nudiff_core::image::Image;
use nudiff_core::linalg::{mat_mul, transpose};
use nudiff_core::multiscale::{design_group_sdes, multiscale_dsm_batch_coeffs, prefix_len, ScaleSchedule};
use nudiff_core::rng::{stream, StreamRng};
use nudiff_core::score::{
    train, AnalyticGaussian, AnalyticGmm, BatchSource, DsmBatch, KernelScaled, Mlp, Preconditioning, ScoreModel,
    TrainOutcome, UnconditionalSource, Weighting,
};
use nudiff_core::sde::NonUniformSde;
use nudiff_core::synthdata::{Dataset, DatasetSampler};
use nudiff_core::wavelet::{analysis_matrix, image_to_coefficients, PyramidLayout};

use crate::config::{Diffusion, ExperimentConfig, ModelConfig};
use crate::format::{derive_seed, read_checkpoint, write_checkpoint, CheckpointHeader};

/// One score network of a run.
#[derive(Debug, Clone)]
pub struct Slot {
    /// `model`, or `scale_i` for multi-scale runs.
    pub role: String,
    pub dim: usize,
    pub cond_dim: usize,
    /// SDE seen by this network, also used for kernel preconditioning.
    pub sde: NonUniformSde,
    /// Multi-scale range index, 1-based.
    pub scale: Option<usize>,
}

impl Slot {
    pub fn checkpoint_path(&self, dir: &Path, ema: bool) -> PathBuf {
        let suffix = if ema { "_ema" } else { "" };
        dir.join(format!("{}{suffix}.ckpt", self.role))
    }
}

pub fn multiscale_sde(
    schedule: &ScaleSchedule,
    layout: &PyramidLayout,
    snr_max: f64,
    snr_min: f64,
) -> Result<NonUniformSde> {
    Ok(design_group_sdes(schedule, layout, snr_max, snr_min)?)
}

pub fn slots(config: &ExperimentConfig) -> Result<Vec<Slot>> {
    match &config.diffusion {
        Diffusion::Uniform(spec) => {
            let slot = match &config.estimator {
                None => Slot {
                    role: "model".into(),
                    dim: config.data.dim(),
                    cond_dim: 0,
                    sde: NonUniformSde::uniform(config.data.dim(), *spec)?,
                    scale: None,
                },
                Some(est) if est.kind() == EstimatorKind::Cde => Slot {
                    role: "model".into(),
                    dim: est.n_x(),
                    cond_dim: est.n_y(),
                    sde: est.x_sde(),
                    scale: None,
                },
                Some(est) => Slot {
                    role: "model".into(),
                    dim: est.n_x() + est.n_y(),
                    cond_dim: 0,
                    sde: est.joint_sde()?,
                    scale: None,
                },
            };
            Ok(vec![slot])
        }
        Diffusion::Multiscale {
            schedule,
            layout,
            snr_max,
            snr_min,
        } => {
            let sde = multiscale_sde(schedule, layout, *snr_max, *snr_min)?;
            (1..=schedule.n_ranges())
                .map(|i| {
                    let len = prefix_len(layout, i)?;
                    Ok(Slot {
                        role: format!("scale_{i}"),
                        dim: len,
                        cond_dim: 0,
                        sde: sde.prefix(len)?,
                        scale: Some(i),
                    })
                })
                .collect()
        }
    }
}

/// Inference-ready score model; cheap to clone per work item.
#[derive(Debug, Clone)]
pub enum Scorer {
    Net(Mlp),
    Scaled(KernelScaled<Mlp>),
    Gaussian(AnalyticGaussian),
    Gmm(AnalyticGmm),
    Conditional(AnalyticConditional),
}

impl ScoreModel for Scorer {
    fn dim(&self) -> usize {
        match self {
            Scorer::Net(m) => m.dim(),
            Scorer::Scaled(m) => m.dim(),
            Scorer::Gaussian(m) => m.dim(),
            Scorer::Gmm(m) => m.dim(),
            Scorer::Conditional(m) => m.dim(),
        }
    }

    fn cond_dim(&self) -> usize {
        match self {
            Scorer::Net(m) => m.cond_dim(),
            Scorer::Scaled(m) => m.cond_dim(),
            Scorer::Gaussian(m) => m.cond_dim(),
            Scorer::Gmm(m) => m.cond_dim(),
            Scorer::Conditional(m) => m.cond_dim(),
        }
    }

    fn score_batch(&self, x: &[f64], cond: &[f64], t: &[f64], out: &mut [f64]) -> nudiff_core::Result<()> {
        match self {
            Scorer::Net(m) => m.score_batch(x, cond, t, out),
            Scorer::Scaled(m) => m.score_batch(x, cond, t, out),
            Scorer::Gaussian(m) => m.score_batch(x, cond, t, out),
            Scorer::Gmm(m) => m.score_batch(x, cond, t, out),
            Scorer::Conditional(m) => m.score_batch(x, cond, t, out),
        }
    }
}

pub fn wrap_trained(mlp: Mlp, preconditioning: Preconditioning, slot: &Slot) -> Result<Scorer> {
    Ok(match preconditioning {
        Preconditioning::None => Scorer::Net(mlp),
        Preconditioning::InverseKernelStd => Scorer::Scaled(KernelScaled::new(mlp, slot.sde.clone())?),
    })
}

/// Exact scores for Gaussian and mixture data, one per slot.
pub fn analytic_scorers(config: &ExperimentConfig, slots: &[Slot]) -> Result<Vec<Scorer>> {
    let dataset = &config.data.dataset;
    if let Some(est) = &config.estimator {
        let joint = config.data.joint().context("conditional runs need joint data")?;
        let scorer = match est.kind() {
            EstimatorKind::Cde => Scorer::Conditional(AnalyticConditional {
                joint: joint.clone(),
                sde_x: est.sde_x(),
            }),
            _ => Scorer::Gaussian(joint.joint_score_model(est)?),
        };
        return Ok(vec![scorer]);
    }
    let (mean, cov) = match dataset {
        Dataset::Gaussian { mean, cov } => (mean.clone(), cov.clone()),
        Dataset::JointGaussian(j) => (j.mean().to_vec(), j.cov().to_vec()),
        Dataset::Gmm { components } => {
            ensure!(slots.len() == 1, "analytic mixture scores are available for single-range runs only");
            return Ok(vec![Scorer::Gmm(AnalyticGmm::new(components.clone(), slots[0].sde.clone())?)]);
        }
        Dataset::ToyImages { .. } => bail!("toy images have no analytic score"),
    };
    match &config.diffusion {
        Diffusion::Uniform(_) => Ok(vec![Scorer::Gaussian(AnalyticGaussian::new(mean, cov, slots[0].sde.clone())?)]),
        Diffusion::Multiscale {
            schedule,
            layout,
            snr_max,
            snr_min,
        } => {
            let d = layout.total();
            let w = analysis_matrix(layout)?;
            let mut mean_c = vec![0.0; d];
            nudiff_core::linalg::mat_vec(&w, d, d, &mean, &mut mean_c);
            let cov_c = mat_mul(&mat_mul(&w, &cov, d, d, d), &transpose(&w, d, d), d, d, d);
            let full = AnalyticGaussian::new(mean_c, cov_c, multiscale_sde(schedule, layout, *snr_max, *snr_min)?)?;
            slots
                .iter()
                .map(|s| Ok(Scorer::Gaussian(full.prefix(s.dim)?)))
                .collect()
        }
    }
}

/// DSM batches for scale model `index` drawn from image data.
struct MultiscaleSource {
    schedule: ScaleSchedule,
    layout: PyramidLayout,
    sde: NonUniformSde,
    index: usize,
    data: DatasetSampler,
    shape: (usize, usize, usize),
    weighting: Weighting,
}

impl BatchSource for MultiscaleSource {
    fn next_batch(&mut self, batch_size: usize, rng: &mut StreamRng) -> nudiff_core::Result<DsmBatch> {
        let (c, h, w) = self.shape;
        let rows = self.data.sample(batch_size, rng);
        let coeffs = rows
            .chunks(c * h * w)
            .map(|row| image_to_coefficients(&Image::new(c, h, w, row.to_vec())?, &self.layout))
            .collect::<nudiff_core::Result<Vec<_>>>()?;
        multiscale_dsm_batch_coeffs(&self.schedule, &self.layout, &self.sde, self.index, &coeffs, self.weighting, rng)
    }
}

pub struct Trained {
    pub slot: Slot,
    pub outcome: TrainOutcome,
}

/// Trains every slot; slots run in parallel, each on its own seeded streams.
pub fn train_all(config: &ExperimentConfig, seed: u64) -> Result<Vec<Trained>> {
    let ModelConfig::Mlp {
        hidden,
        activation,
        preconditioning,
    } = &config.model
    else {
        bail!("model.kind = \"analytic\" has nothing to train");
    };
    let settings = config.train.as_ref().context("the train command needs a [train] section")?;
    let slots = slots(config)?;
    slots
        .into_par_iter()
        .map(|slot| {
            let init_seed = derive_seed(seed, &format!("init/{}", slot.role));
            let init = Mlp::init(slot.dim, slot.cond_dim, hidden, *activation, &mut stream(init_seed, 0))?;
            let mut train_config = settings.config.clone();
            train_config.seed = derive_seed(seed, &format!("train/{}", slot.role));
            train_config.preconditioning = *preconditioning;
            let data = DatasetSampler::new(config.data.dataset.clone())?;
            let mut source: Box<dyn BatchSource> = match (&config.diffusion, &config.estimator) {
                (Diffusion::Uniform(_), None) => {
                    let mut s = UnconditionalSource::new(slot.sde.clone(), data, train_config.weighting);
                    if let Some(t_min) = settings.t_min {
                        s.t_lo = t_min;
                    }
                    Box::new(s)
                }
                (Diffusion::Uniform(spec), Some(est)) => {
                    let s = ConditionalSource::new(*est, data);
                    Box::new(s.with_t_lo(settings.t_min.unwrap_or(spec.epsilon()))?)
                }
                (
                    Diffusion::Multiscale {
                        schedule,
                        layout,
                        snr_max,
                        snr_min,
                    },
                    _,
                ) => Box::new(MultiscaleSource {
                    schedule: *schedule,
                    layout: layout.clone(),
                    sde: multiscale_sde(schedule, layout, *snr_max, *snr_min)?,
                    index: slot.scale.expect("multi-scale slots carry their index"),
                    data,
                    shape: config.data.image_shape.expect("validated image data"),
                    weighting: train_config.weighting,
                }),
            };
            let outcome = train(init, source.as_mut(), &train_config)
                .with_context(|| format!("training {}", slot.role))?;
            Ok(Trained { slot, outcome })
        })
        .collect()
}

pub fn checkpoint_header(config: &ExperimentConfig, seed: u64, slot: &Slot, mlp: &Mlp, ema: bool) -> CheckpointHeader {
    let preconditioning = match &config.model {
        ModelConfig::Mlp { preconditioning, .. } => *preconditioning,
        ModelConfig::Analytic => Preconditioning::None,
    };
    CheckpointHeader {
        role: slot.role.clone(),
        weights: if ema { "ema" } else { "raw" }.into(),
        dim: slot.dim,
        cond_dim: slot.cond_dim,
        sizes: mlp.sizes().to_vec(),
        activation: mlp.activation(),
        preconditioning,
        config_hash: config.hash.clone(),
        seed,
    }
}

/// Writes raw and EMA checkpoints; returns their paths.
pub fn save(config: &ExperimentConfig, seed: u64, dir: &Path, trained: &Trained) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (mlp, ema) in [(&trained.outcome.model, false), (&trained.outcome.ema, true)] {
        let path = trained.slot.checkpoint_path(dir, ema);
        write_checkpoint(&path, &checkpoint_header(config, seed, &trained.slot, mlp, ema), mlp)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads one checkpoint per slot, rejecting any that disagree with the
/// config's architecture.
pub fn load_scorers(config: &ExperimentConfig, dir: &Path, ema: bool) -> Result<(Vec<Scorer>, Vec<PathBuf>)> {
    let slots = slots(config)?;
    let ModelConfig::Mlp {
        hidden,
        activation,
        preconditioning,
    } = &config.model
    else {
        return Ok((analytic_scorers(config, &slots)?, Vec::new()));
    };
    let mut scorers = Vec::with_capacity(slots.len());
    let mut paths = Vec::with_capacity(slots.len());
    for slot in &slots {
        let path = slot.checkpoint_path(dir, ema);
        let (header, mlp) = read_checkpoint(&path)?;
        let expected = Mlp::zeros(slot.dim, slot.cond_dim, hidden, *activation)?;
        let mismatch = |what: &str| format!("checkpoint {} does not match the config: {what}", path.display());
        ensure!(header.role == slot.role, mismatch(&format!("role {} vs {}", header.role, slot.role)));
        ensure!(
            header.dim == slot.dim && header.cond_dim == slot.cond_dim,
            mismatch(&format!(
                "dimensions {}+{} vs {}+{}",
                header.dim, header.cond_dim, slot.dim, slot.cond_dim
            ))
        );
        ensure!(
            header.sizes == expected.sizes(),
            mismatch(&format!("layer sizes {:?} vs {:?}", header.sizes, expected.sizes()))
        );
        ensure!(header.activation == *activation, mismatch("activation"));
        ensure!(header.preconditioning == *preconditioning, mismatch("preconditioning"));
        scorers.push(wrap_trained(mlp, *preconditioning, slot)?);
        paths.push(path);
    }
    Ok((scorers, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nudiff_core::score::score_at;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text, Path::new("")).unwrap()
    }

    const IMAGES: &str = r#"
[dataset]
kind = "smooth_gaussian_images"
height = 4
width = 4
length = 1.5
variance = 1.0

[multiscale]
n_levels = 1

[model]
kind = "analytic"
"#;

    #[test]
    fn multiscale_has_one_slot_per_range_with_growing_prefixes() {
        let s = slots(&config(IMAGES)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].role.as_str(), s[0].dim), ("scale_1", 16));
        assert_eq!((s[1].role.as_str(), s[1].dim), ("scale_2", 4));
    }

    #[test]
    fn analytic_multiscale_scores_match_the_coefficient_gaussian() {
        let c = config(IMAGES);
        let s = slots(&c).unwrap();
        let scorers = analytic_scorers(&c, &s).unwrap();
        // The first slot sees the full coefficient vector.
        let x: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.7).collect();
        let got = score_at(&scorers[0], &x, 0.3).unwrap();
        let Diffusion::Multiscale { layout, .. } = &c.diffusion else { panic!() };
        let w = analysis_matrix(layout).unwrap();
        let Dataset::Gaussian { cov, .. } = &c.data.dataset else { panic!() };
        let cov_c = mat_mul(&mat_mul(&w, cov, 16, 16, 16), &transpose(&w, 16, 16), 16, 16, 16);
        let oracle = AnalyticGaussian::new(vec![0.0; 16], cov_c, s[0].sde.clone()).unwrap();
        let want = score_at(&oracle, &x, 0.3).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(scorers[1].dim(), 4);
    }

    #[test]
    fn conditional_slots_follow_the_estimator() {
        let base = r#"
[dataset]
kind = "standard_pair"
rho = 0.5

[sde]
family = "ve"
sigma_min = 0.1
sigma_max = 10
"#;
        let cde = config(&format!("{base}\n[estimator]\nkind = \"cde\"\n"));
        let s = slots(&cde).unwrap();
        assert_eq!((s[0].dim, s[0].cond_dim), (1, 1));
        let cmde = config(&format!("{base}\n[estimator]\nkind = \"cmde\"\nsigma_y_max = 0.2\n"));
        let s = slots(&cmde).unwrap();
        assert_eq!((s[0].dim, s[0].cond_dim), (2, 0));
    }
}
