//! Experiment configuration.
//!
//! A config is a TOML document. Every section rejects unknown keys and the
//! whole document is validated before any command starts computing; errors
//! name the line of the offending section or value.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Deserialize;
use toml::Spanned;

use nudiff_core::conditional::{CondEstimatorSpec, GaussianJoint};
use nudiff_core::multiscale::{build_schedule, ScaleSchedule};
use nudiff_core::score::{Activation, GmmComponent, Optimizer, Preconditioning, TrainConfig, Weighting};
use nudiff_core::sde::{Scheme, SdeFamily, SdeSpec, DEFAULT_EPSILON};
use nudiff_core::synthdata::{Dataset, DatasetSampler, ForwardOperator, ToyPattern};
use nudiff_core::verify::default_snr_endpoints;
use nudiff_core::wavelet::PyramidLayout;

use crate::format::config_hash;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    dataset: Spanned<RawDataset>,
    sde: Option<Spanned<RawSde>>,
    model: Option<Spanned<RawModel>>,
    multiscale: Option<Spanned<RawMultiscale>>,
    estimator: Option<Spanned<RawEstimator>>,
    train: Option<Spanned<RawTrain>>,
    sampler: Option<Spanned<RawSampler>>,
    eval: Option<Spanned<RawEval>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComponent {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawDataset {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<f64>,
        shape: Option<[usize; 3]>,
    },
    Gmm2d {
        offset: f64,
        std: f64,
    },
    Gmm {
        components: Vec<RawComponent>,
    },
    JointGaussian {
        n_x: usize,
        n_y: usize,
        mean: Vec<f64>,
        cov: Vec<f64>,
    },
    StandardPair {
        rho: f64,
    },
    ToyImages {
        pattern: ToyPattern,
        height: usize,
        width: usize,
    },
    SmoothGaussianImages {
        height: usize,
        width: usize,
        length: f64,
        variance: f64,
    },
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
enum RawSde {
    Ve {
        sigma_min: f64,
        sigma_max: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "one")]
        horizon: f64,
    },
    VpBetaLinear {
        beta_min: f64,
        beta_max: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "one")]
        horizon: f64,
    },
    VpLogLinearSnr {
        snr_max: f64,
        snr_min: f64,
        terminal_time: Option<f64>,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "one")]
        horizon: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawModel {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default)]
        preconditioning: Preconditioning,
    },
    Analytic,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Silu
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMultiscale {
    n_levels: usize,
    snr_max: Option<f64>,
    snr_min: Option<f64>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawEstimatorKind {
    Cde,
    Cdiffe,
    Cmde,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    kind: RawEstimatorKind,
    sigma_y_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    #[serde(default = "default_optimizer")]
    optimizer: RawOptimizer,
    lr: f64,
    beta1: Option<f64>,
    beta2: Option<f64>,
    adam_eps: Option<f64>,
    #[serde(default = "default_batch")]
    batch_size: usize,
    iterations: usize,
    #[serde(default = "default_ema")]
    ema_rate: f64,
    #[serde(default)]
    weighting: Weighting,
    #[serde(default = "one")]
    final_lr_fraction: f64,
    t_min: Option<f64>,
}

fn default_optimizer() -> RawOptimizer {
    RawOptimizer::Adam
}

fn default_batch() -> usize {
    128
}

fn default_ema() -> f64 {
    0.999
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampler {
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_scheme")]
    scheme: Scheme,
    #[serde(default = "default_n_samples")]
    n_samples: usize,
    #[serde(default)]
    tweedie: bool,
    condition_file: Option<PathBuf>,
    #[serde(default = "default_chunk")]
    chunk: usize,
}

impl Default for RawSampler {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            scheme: default_scheme(),
            n_samples: default_n_samples(),
            tweedie: false,
            condition_file: None,
            chunk: default_chunk(),
        }
    }
}

fn default_steps() -> usize {
    256
}

fn default_scheme() -> Scheme {
    Scheme::EulerMaruyama
}

fn default_n_samples() -> usize {
    1000
}

fn default_chunk() -> usize {
    256
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    #[serde(default = "default_reference")]
    reference_samples: usize,
    #[serde(default = "default_projections")]
    projections: usize,
    #[serde(default = "one")]
    peak: f64,
    operator: Option<ForwardOperator>,
}

impl Default for RawEval {
    fn default() -> Self {
        Self {
            reference_samples: default_reference(),
            projections: default_projections(),
            peak: 1.0,
            operator: None,
        }
    }
}

fn default_reference() -> usize {
    2000
}

fn default_projections() -> usize {
    64
}

/// Training data and, for image data, its `(channels, height, width)`.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub dataset: Dataset,
    pub image_shape: Option<(usize, usize, usize)>,
}

impl DataConfig {
    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn joint(&self) -> Option<&GaussianJoint> {
        match &self.dataset {
            Dataset::JointGaussian(j) => Some(j),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Diffusion {
    Uniform(SdeSpec),
    Multiscale {
        schedule: ScaleSchedule,
        layout: PyramidLayout,
        snr_max: f64,
        snr_min: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
        preconditioning: Preconditioning,
    },
    Analytic,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    /// `seed` is overwritten per model at training time.
    pub config: TrainConfig,
    /// Lower end of the training time range; defaults to the SDE's epsilon.
    pub t_min: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Steps over the whole range, or per range for multi-scale runs.
    pub steps: usize,
    pub scheme: Scheme,
    pub n_samples: usize,
    pub tweedie: bool,
    /// Resolved against the config file's directory.
    pub condition_file: Option<PathBuf>,
    /// Chains per parallel work item.
    pub chunk: usize,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub reference_samples: usize,
    pub projections: usize,
    pub peak: f64,
    pub operator: Option<ForwardOperator>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub diffusion: Diffusion,
    pub estimator: Option<CondEstimatorSpec>,
    pub model: ModelConfig,
    pub train: Option<TrainSettings>,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    /// Hex SHA-256 of the config text.
    pub hash: String,
}

/// Positions errors at the line where a span starts.
struct Locator<'a> {
    text: &'a str,
}

impl Locator<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        let end = span.start.min(self.text.len());
        self.text[..end].bytes().filter(|&b| b == b'\n').count() + 1
    }

    fn err<T>(&self, spanned: &Spanned<T>, msg: impl std::fmt::Display) -> anyhow::Error {
        anyhow!("line {}: {msg}", self.line(spanned.span()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| Locator { text }.line(s));
            match line {
                Some(l) => anyhow!("line {l}: {}", e.message()),
                None => anyhow!("{}", e.message()),
            }
        })?;
        let loc = Locator { text };

        let data = build_data(&raw.dataset, &loc)?;
        let diffusion = match (&raw.sde, &raw.multiscale) {
            (Some(_), Some(ms)) => return Err(loc.err(ms, "[sde] and [multiscale] are mutually exclusive")),
            (None, None) => return Err(anyhow!("one of [sde] or [multiscale] is required")),
            (Some(sde), None) => Diffusion::Uniform(build_sde(sde, &loc)?),
            (None, Some(ms)) => build_multiscale(ms, &data, &loc)?,
        };

        let train = raw.train.as_ref().map(|t| build_train(t, &diffusion, &loc)).transpose()?;
        let weighting = train.as_ref().map_or(Weighting::LikelihoodMatrix, |t| t.config.weighting);

        let estimator = match &raw.estimator {
            None => None,
            Some(est) => Some(build_estimator(est, &data, &diffusion, weighting, &loc)?),
        };

        let model = match raw.model.as_ref() {
            None => ModelConfig::Mlp {
                hidden: default_hidden(),
                activation: default_activation(),
                preconditioning: Preconditioning::None,
            },
            Some(m) => build_model(m, &data, &loc)?,
        };

        let sampler = build_sampler(raw.sampler.as_ref(), &diffusion, estimator.is_some(), base, &loc)?;
        let eval = build_eval(raw.eval.as_ref(), &data, &loc)?;

        Ok(Self {
            seed: raw.seed.unwrap_or(0),
            out_dir: raw.out_dir.map(|p| if p.is_absolute() { p } else { base.join(p) }),
            data,
            diffusion,
            estimator,
            model,
            train,
            sampler,
            eval,
            hash: config_hash(text),
        })
    }

    pub fn is_multiscale(&self) -> bool {
        matches!(self.diffusion, Diffusion::Multiscale { .. })
    }
}

fn build_data(raw: &Spanned<RawDataset>, loc: &Locator) -> Result<DataConfig> {
    let (dataset, image_shape) = match raw.get_ref() {
        RawDataset::Gaussian { mean, cov, shape } => {
            if let Some([c, h, w]) = shape {
                if c * h * w != mean.len() {
                    return Err(loc.err(raw, format!("shape {c}x{h}x{w} does not match dimension {}", mean.len())));
                }
            }
            let shape = shape.map(|[c, h, w]| (c, h, w));
            (
                Dataset::Gaussian {
                    mean: mean.clone(),
                    cov: cov.clone(),
                },
                shape,
            )
        }
        RawDataset::Gmm2d { offset, std } => (Dataset::symmetric_gmm2d(*offset, *std), None),
        RawDataset::Gmm { components } => (
            Dataset::Gmm {
                components: components
                    .iter()
                    .map(|c| GmmComponent {
                        weight: c.weight,
                        mean: c.mean.clone(),
                        cov: c.cov.clone(),
                    })
                    .collect(),
            },
            None,
        ),
        RawDataset::JointGaussian { n_x, n_y, mean, cov } => {
            let joint = GaussianJoint::new(*n_x, *n_y, mean.clone(), cov.clone()).map_err(|e| loc.err(raw, e))?;
            (Dataset::JointGaussian(joint), None)
        }
        RawDataset::StandardPair { rho } => {
            let joint = GaussianJoint::standard_pair(*rho).map_err(|e| loc.err(raw, e))?;
            (Dataset::JointGaussian(joint), None)
        }
        RawDataset::ToyImages { pattern, height, width } => (
            Dataset::ToyImages {
                pattern: *pattern,
                height: *height,
                width: *width,
            },
            Some((1, *height, *width)),
        ),
        RawDataset::SmoothGaussianImages {
            height,
            width,
            length,
            variance,
        } => {
            if !(*length > 0.0 && *variance > 0.0) || *height == 0 || *width == 0 {
                return Err(loc.err(raw, "smooth Gaussian images need positive size, length and variance"));
            }
            (
                Dataset::smooth_gaussian_images(*height, *width, *length, *variance),
                Some((1, *height, *width)),
            )
        }
    };
    if dataset.dim() == 0 {
        return Err(loc.err(raw, "dataset dimension must be positive"));
    }
    DatasetSampler::new(dataset.clone()).map_err(|e| loc.err(raw, e))?;
    Ok(DataConfig { dataset, image_shape })
}

fn build_sde(raw: &Spanned<RawSde>, loc: &Locator) -> Result<SdeSpec> {
    let (family, epsilon, horizon) = match *raw.get_ref() {
        RawSde::Ve {
            sigma_min,
            sigma_max,
            epsilon,
            horizon,
        } => (SdeFamily::Ve { sigma_min, sigma_max }, epsilon, horizon),
        RawSde::VpBetaLinear {
            beta_min,
            beta_max,
            epsilon,
            horizon,
        } => (SdeFamily::VpBetaLinear { beta_min, beta_max }, epsilon, horizon),
        RawSde::VpLogLinearSnr {
            snr_max,
            snr_min,
            terminal_time,
            epsilon,
            horizon,
        } => (
            SdeFamily::VpLogLinearSnr {
                snr_max,
                snr_min,
                terminal_time: terminal_time.unwrap_or(horizon),
            },
            epsilon,
            horizon,
        ),
    };
    SdeSpec::new(family, horizon, epsilon).map_err(|e| loc.err(raw, e))
}

fn build_multiscale(raw: &Spanned<RawMultiscale>, data: &DataConfig, loc: &Locator) -> Result<Diffusion> {
    let ms = raw.get_ref();
    let Some((c, h, w)) = data.image_shape else {
        return Err(loc.err(raw, "multi-scale diffusion needs image data (toy_images, smooth_gaussian_images or gaussian with shape)"));
    };
    let schedule = build_schedule(ms.n_levels, ms.epsilon).map_err(|e| loc.err(raw, e))?;
    let layout = PyramidLayout::new(c, h, w, ms.n_levels).map_err(|e| loc.err(raw, e))?;
    let (dmax, dmin) = default_snr_endpoints(ms.epsilon).map_err(|e| loc.err(raw, e))?;
    let (snr_max, snr_min) = (ms.snr_max.unwrap_or(dmax), ms.snr_min.unwrap_or(dmin));
    if !(snr_max > snr_min && snr_min > 0.0) {
        return Err(loc.err(raw, "SNR endpoints must satisfy snr_max > snr_min > 0"));
    }
    Ok(Diffusion::Multiscale {
        schedule,
        layout,
        snr_max,
        snr_min,
    })
}

fn build_train(raw: &Spanned<RawTrain>, diffusion: &Diffusion, loc: &Locator) -> Result<TrainSettings> {
    let t = raw.get_ref();
    let optimizer = match t.optimizer {
        RawOptimizer::Adam => Optimizer::Adam {
            lr: t.lr,
            beta1: t.beta1.unwrap_or(0.9),
            beta2: t.beta2.unwrap_or(0.999),
            eps: t.adam_eps.unwrap_or(1e-8),
        },
        RawOptimizer::Sgd => {
            if t.beta1.is_some() || t.beta2.is_some() || t.adam_eps.is_some() {
                return Err(loc.err(raw, "beta1, beta2 and adam_eps only apply to optimizer = \"adam\""));
            }
            Optimizer::Sgd { lr: t.lr }
        }
    };
    let config = TrainConfig {
        optimizer,
        batch_size: t.batch_size,
        iterations: t.iterations,
        ema_rate: t.ema_rate,
        seed: 0,
        weighting: t.weighting,
        preconditioning: Preconditioning::None,
        final_lr_fraction: t.final_lr_fraction,
    };
    config.validate().map_err(|e| loc.err(raw, e))?;
    if t.iterations == 0 {
        return Err(loc.err(raw, "iterations must be positive"));
    }
    if let Some(t_min) = t.t_min {
        match diffusion {
            Diffusion::Multiscale { .. } => {
                return Err(loc.err(raw, "t_min does not apply to multi-scale training, whose ranges are fixed"))
            }
            Diffusion::Uniform(sde) => {
                if !(t_min >= sde.epsilon() && t_min < sde.horizon()) {
                    return Err(loc.err(raw, format!("t_min must lie in [epsilon, horizon) = [{}, {})", sde.epsilon(), sde.horizon())));
                }
            }
        }
    }
    Ok(TrainSettings { config, t_min: t.t_min })
}

fn build_estimator(
    raw: &Spanned<RawEstimator>,
    data: &DataConfig,
    diffusion: &Diffusion,
    weighting: Weighting,
    loc: &Locator,
) -> Result<CondEstimatorSpec> {
    let est = raw.get_ref();
    let Diffusion::Uniform(sde) = diffusion else {
        return Err(loc.err(raw, "conditional estimators need an [sde] section, not [multiscale]"));
    };
    let Some(joint) = data.joint() else {
        return Err(loc.err(raw, "conditional estimators need a joint_gaussian or standard_pair dataset"));
    };
    let (n_x, n_y) = (joint.n_x(), joint.n_y());
    if est.kind != RawEstimatorKind::Cmde && est.sigma_y_max.is_some() {
        return Err(loc.err(raw, "sigma_y_max only applies to kind = \"cmde\""));
    }
    let spec = match est.kind {
        RawEstimatorKind::Cde => CondEstimatorSpec::cde(n_x, n_y, *sde, weighting),
        RawEstimatorKind::Cdiffe => CondEstimatorSpec::cdiffe(n_x, n_y, *sde, weighting),
        RawEstimatorKind::Cmde => {
            let Some(sigma_y_max) = est.sigma_y_max else {
                return Err(loc.err(raw, "kind = \"cmde\" needs sigma_y_max"));
            };
            CondEstimatorSpec::cmde(n_x, n_y, *sde, sigma_y_max, weighting)
        }
    };
    spec.map_err(|e| loc.err(raw, e))
}

fn build_model(raw: &Spanned<RawModel>, data: &DataConfig, loc: &Locator) -> Result<ModelConfig> {
    match raw.get_ref() {
        RawModel::Mlp {
            hidden,
            activation,
            preconditioning,
        } => {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(loc.err(raw, "hidden must list at least one positive layer width"));
            }
            Ok(ModelConfig::Mlp {
                hidden: hidden.clone(),
                activation: *activation,
                preconditioning: *preconditioning,
            })
        }
        RawModel::Analytic => match data.dataset {
            Dataset::ToyImages { .. } => Err(loc.err(raw, "toy_images have no analytic score; use kind = \"mlp\"")),
            _ => Ok(ModelConfig::Analytic),
        },
    }
}

fn build_sampler(
    raw: Option<&Spanned<RawSampler>>,
    diffusion: &Diffusion,
    conditional: bool,
    base: &Path,
    loc: &Locator,
) -> Result<SamplerConfig> {
    let default = RawSampler::default();
    let s = raw.map_or(&default, |r| r.get_ref());
    let fail = |msg: &str| match raw {
        Some(r) => loc.err(r, msg),
        None => anyhow!("[sampler] {msg}"),
    };
    if s.steps == 0 || s.chunk == 0 {
        return Err(fail("steps and chunk must be positive"));
    }
    if conditional && s.tweedie {
        return Err(fail("tweedie denoising is only available for unconditional sampling"));
    }
    if !conditional && s.condition_file.is_some() {
        return Err(fail("condition_file needs an [estimator] section"));
    }
    if matches!(diffusion, Diffusion::Multiscale { .. }) && s.scheme != Scheme::EulerMaruyama {
        return Err(fail("the cascaded sampler integrates with euler_maruyama only"));
    }
    Ok(SamplerConfig {
        steps: s.steps,
        scheme: s.scheme,
        n_samples: s.n_samples,
        tweedie: s.tweedie,
        condition_file: s.condition_file.as_ref().map(|p| base.join(p)),
        chunk: s.chunk,
    })
}

fn build_eval(raw: Option<&Spanned<RawEval>>, data: &DataConfig, loc: &Locator) -> Result<EvalConfig> {
    let default = RawEval::default();
    let e = raw.map_or(&default, |r| r.get_ref());
    let fail = |msg: String| match raw {
        Some(r) => loc.err(r, msg),
        None => anyhow!("[eval] {msg}"),
    };
    if e.reference_samples < 2 || e.projections == 0 {
        return Err(fail("reference_samples must be at least 2 and projections positive".into()));
    }
    if !(e.peak > 0.0) {
        return Err(fail("peak must be positive".into()));
    }
    if let Some(op) = &e.operator {
        let Some((c, h, w)) = data.image_shape else {
            return Err(fail("forward operators need image data".into()));
        };
        op.output_shape(c, h, w).map_err(|err| fail(err.to_string()))?;
    }
    Ok(EvalConfig {
        reference_samples: e.reference_samples,
        projections: e.projections,
        peak: e.peak,
        operator: e.operator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[dataset]
kind = "gaussian"
mean = [0.0]
cov = [1.0]

[sde]
family = "ve"
sigma_min = 0.01
sigma_max = 5

[train]
lr = 1e-3
iterations = 100
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new(""))
    }

    #[test]
    fn minimal_config_validates() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data.dim(), 1);
        assert_eq!(c.sampler.steps, 256);
        let Diffusion::Uniform(sde) = c.diffusion else { panic!() };
        assert_eq!(sde.epsilon(), DEFAULT_EPSILON);
        assert_eq!(c.train.unwrap().config.iterations, 100);
        assert_eq!(c.hash, config_hash(MINIMAL));
    }

    #[test]
    fn unknown_keys_are_rejected_at_their_section() {
        let text = MINIMAL.replace("sigma_max = 5", "sigma_max = 5\nsigma_mid = 1");
        let msg = format!("{:#}", parse(&text).unwrap_err());
        let line = text.lines().position(|l| l == "[sde]").unwrap() + 1;
        assert!(msg.contains("sigma_mid"), "{msg}");
        assert!(msg.starts_with(&format!("line {line}:")), "{msg}");
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        let msg = format!("{:#}", parse(&text).unwrap_err());
        assert!(msg.contains("extra"), "{msg}");
    }

    #[test]
    fn semantic_errors_point_at_the_section() {
        let text = MINIMAL.replace("sigma_max = 5", "sigma_max = 0.001");
        let msg = format!("{:#}", parse(&text).unwrap_err());
        let sde_line = MINIMAL.lines().position(|l| l.starts_with("family")).unwrap() + 1;
        assert!(msg.starts_with("line "), "{msg}");
        let line: usize = msg["line ".len()..].split(':').next().unwrap().parse().unwrap();
        assert!(line + 1 >= sde_line && line <= sde_line + 2, "{msg} vs {sde_line}");
        assert!(msg.contains("sigma_min < sigma_max"), "{msg}");
    }

    #[test]
    fn sde_and_multiscale_are_exclusive() {
        let text = format!("{MINIMAL}\n[multiscale]\nn_levels = 1\n");
        assert!(format!("{:#}", parse(&text).unwrap_err()).contains("mutually exclusive"));
        let text = MINIMAL.replace("[sde]", "[other]");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn multiscale_needs_images_with_compatible_shape() {
        let text = r#"
[dataset]
kind = "smooth_gaussian_images"
height = 8
width = 8
length = 2.0
variance = 1.0

[multiscale]
n_levels = 3
"#;
        let c = parse(text).unwrap();
        let Diffusion::Multiscale { layout, snr_max, snr_min, .. } = &c.diffusion else { panic!() };
        assert_eq!(layout.total(), 64);
        assert!(snr_max > snr_min);
        assert!(parse(&text.replace("n_levels = 3", "n_levels = 4")).is_err());
        let text = MINIMAL.replace("[sde]\nfamily = \"ve\"\nsigma_min = 0.01\nsigma_max = 5", "[multiscale]\nn_levels = 1");
        assert!(format!("{:#}", parse(&text).unwrap_err()).contains("image data"));
    }

    #[test]
    fn estimators_need_joint_data() {
        let text = format!("{MINIMAL}\n[estimator]\nkind = \"cde\"\n");
        assert!(format!("{:#}", parse(&text).unwrap_err()).contains("joint"));
        let pair = MINIMAL.replace("kind = \"gaussian\"\nmean = [0.0]\ncov = [1.0]", "kind = \"standard_pair\"\nrho = 0.8");
        let c = parse(&format!("{pair}\n[estimator]\nkind = \"cmde\"\nsigma_y_max = 0.1\n")).unwrap();
        assert!(c.estimator.is_some());
        assert!(parse(&format!("{pair}\n[estimator]\nkind = \"cmde\"\n")).is_err());
        assert!(parse(&format!("{pair}\n[estimator]\nkind = \"cde\"\nsigma_y_max = 0.1\n")).is_err());
        let tweedie = format!("{pair}\n[estimator]\nkind = \"cde\"\n[sampler]\ntweedie = true\n");
        assert!(parse(&tweedie).is_err());
    }

    #[test]
    fn train_values_are_checked() {
        assert!(parse(&MINIMAL.replace("lr = 1e-3", "lr = -1.0")).is_err());
        assert!(parse(&MINIMAL.replace("iterations = 100", "iterations = 0")).is_err());
        assert!(parse(&MINIMAL.replace("iterations = 100", "iterations = 10\nt_min = 2.0")).is_err());
        let sgd = MINIMAL.replace("lr = 1e-3", "optimizer = \"sgd\"\nlr = 1e-3\nbeta1 = 0.5");
        assert!(parse(&sgd).is_err());
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let text = MINIMAL.replace("seed = 3", "seed = = 3");
        let msg = format!("{:#}", parse(&text).unwrap_err());
        assert!(msg.starts_with("line 2:"), "{msg}");
    }

    #[test]
    fn analytic_model_rejects_toy_images() {
        let text = r#"
[dataset]
kind = "toy_images"
pattern = "blob"
height = 4
width = 4

[sde]
family = "ve"
sigma_min = 0.01
sigma_max = 5

[model]
kind = "analytic"
"#;
        assert!(parse(text).is_err());
        assert!(parse(&text.replace("kind = \"analytic\"", "kind = \"mlp\"\nhidden = [8]")).is_ok());
    }
}
