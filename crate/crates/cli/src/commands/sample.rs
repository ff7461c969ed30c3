use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use nudiff_core::multiscale::{multiscale_sample, CostProfile, MultiscaleModel};
use nudiff_core::rng::stream;
use nudiff_core::score::ScoreModel;
use nudiff_core::sde::{integrate_reverse, tweedie_denoise, Scheme, TimeGrid};

use super::{write_json, Run};
use crate::config::Diffusion;
use crate::format::{derive_seed, read_rows, write_tensor, Tensor};
use crate::models::{load_scorers, multiscale_sde, slots, Scorer};

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    /// Overrides `sampler.n_samples`.
    pub n: Option<usize>,
    /// Directory holding the checkpoints; defaults to the output directory.
    pub checkpoints: Option<PathBuf>,
    /// Use the raw weights instead of the EMA weights.
    pub raw_weights: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRange {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub shape: Vec<usize>,
    pub scheme: Scheme,
    pub tweedie: bool,
    /// One entry per integration range, in integration order.
    pub grid: Vec<GridRange>,
    pub seconds_per_sample: Option<f64>,
    pub cost_profile: CostProfile,
    pub conditions: Option<Vec<Vec<f64>>>,
    pub checkpoints: Vec<PathBuf>,
    pub weights: &'static str,
}

/// Draws samples and writes `samples.ndt` plus `samples.json`.
///
/// Chains are split into fixed chunks of `sampler.chunk`; chunk `k` of
/// condition row `r` runs on its own stream `(r << 32) | k`, so the output
/// does not depend on the number of threads.
pub fn sample(run: &Run, opts: &SampleOptions) -> Result<SampleMetadata> {
    let cfg = &run.config;
    let s = &cfg.sampler;
    let n = opts.n.unwrap_or(s.n_samples);

    let conditions = match &cfg.estimator {
        None => None,
        Some(est) => {
            let path = s
                .condition_file
                .as_ref()
                .context("conditional sampling needs sampler.condition_file")?;
            if !path.is_file() {
                bail!("condition file {} does not exist", path.display());
            }
            let rows = read_rows(path)?;
            ensure!(!rows.is_empty(), "condition file {} has no rows", path.display());
            for (i, r) in rows.iter().enumerate() {
                ensure!(
                    r.len() == est.n_y(),
                    "condition file {} row {}: expected {} values, found {}",
                    path.display(),
                    i + 1,
                    est.n_y(),
                    r.len()
                );
            }
            Some(rows)
        }
    };

    let ckpt_dir = opts.checkpoints.clone().unwrap_or_else(|| run.out_dir.clone());
    let (scorers, checkpoints) = load_scorers(cfg, &ckpt_dir, !opts.raw_weights)?;
    let slot_list = slots(cfg)?;
    let sample_seed = derive_seed(run.seed, "sample");

    let rows = conditions.as_ref().map_or(1, Vec::len);
    let chunks = n.div_ceil(s.chunk);
    let items: Vec<(usize, usize, usize)> = (0..rows)
        .flat_map(|r| (0..chunks).map(move |k| (r, k, s.chunk.min(n - k * s.chunk))))
        .collect();

    let (grid, cost_profile, row_width) = match &cfg.diffusion {
        Diffusion::Uniform(_) => {
            let sde = match &cfg.estimator {
                Some(est) => est.x_sde(),
                None => slot_list[0].sde.clone(),
            };
            let range = GridRange {
                t_start: sde.horizon(),
                t_end: sde.epsilon(),
                steps: s.steps,
            };
            let work = slot_list[0].dim * s.steps;
            let profile = CostProfile {
                per_range: vec![work],
                total: work,
                uniform_baseline: work,
                ratio: 1.0,
            };
            (vec![range], profile, sde.dim())
        }
        Diffusion::Multiscale { schedule, layout, .. } => {
            let ranges = (1..=schedule.n_ranges())
                .rev()
                .map(|i| {
                    let (lo, hi) = schedule.range(i)?;
                    Ok(GridRange {
                        t_start: hi,
                        t_end: lo,
                        steps: s.steps,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let profile = CostProfile::for_layout(layout, &vec![s.steps; schedule.n_ranges()]);
            (ranges, profile, layout.total())
        }
    };

    let started = Instant::now();
    let blocks: Vec<Vec<f64>> = items
        .par_iter()
        .map(|&(r, k, m)| -> Result<Vec<f64>> {
            let mut rng = stream(sample_seed, ((r as u64) << 32) | k as u64);
            match (&cfg.diffusion, &cfg.estimator) {
                (Diffusion::Uniform(_), None) => {
                    let sde = &slot_list[0].sde;
                    let scorer = &scorers[0];
                    let grid = TimeGrid::uniform(sde.horizon(), sde.epsilon(), s.steps, s.scheme)?;
                    let start = sde.sample_prior(m, &mut rng);
                    let mut x = integrate_reverse(sde, scorer, &start, &grid, &mut rng)?;
                    if s.tweedie {
                        x = tweedie_denoise(sde, scorer, &x, sde.epsilon())?;
                    }
                    Ok(x)
                }
                (Diffusion::Uniform(_), Some(est)) => {
                    let sde_x = est.sde_x();
                    let grid = TimeGrid::uniform(sde_x.horizon(), sde_x.epsilon(), s.steps, s.scheme)?;
                    let y = &conditions.as_ref().expect("conditions loaded")[r];
                    Ok(nudiff_core::conditional::conditional_sample(est, &scorers[0], y, m, &grid, &mut rng)?)
                }
                (
                    Diffusion::Multiscale {
                        schedule,
                        layout,
                        snr_max,
                        snr_min,
                    },
                    _,
                ) => {
                    let models = scorers
                        .iter()
                        .map(|sc: &Scorer| Box::new(sc.clone()) as Box<dyn ScoreModel>)
                        .collect();
                    let sde = multiscale_sde(schedule, layout, *snr_max, *snr_min)?;
                    let model = MultiscaleModel::new(*schedule, layout.clone(), sde, models)?;
                    let out = multiscale_sample(&model, &vec![s.steps; schedule.n_ranges()], m, s.tweedie, &mut rng)?;
                    Ok(out.images.into_iter().flat_map(|im| im.data).collect())
                }
            }
        })
        .collect::<Result<_>>()?;
    let elapsed = started.elapsed().as_secs_f64();

    let data: Vec<f64> = blocks.into_iter().flatten().collect();
    let mut shape = match (&cfg.data.image_shape, &cfg.estimator) {
        (Some((c, h, w)), None) => vec![n, *c, *h, *w],
        _ => vec![n, row_width],
    };
    if conditions.is_some() {
        shape.insert(0, rows);
    }
    let tensor = Tensor::new(shape.clone(), data)?;
    let dir = run.ensure_out_dir()?;
    write_tensor(&dir.join("samples.ndt"), &tensor)?;

    let total = n * rows;
    let meta = SampleMetadata {
        config_hash: cfg.hash.clone(),
        seed: run.seed,
        n_samples: n,
        shape,
        scheme: s.scheme,
        tweedie: s.tweedie,
        grid,
        seconds_per_sample: (total > 0).then(|| elapsed / total as f64),
        cost_profile,
        conditions,
        checkpoints,
        weights: if opts.raw_weights { "raw" } else { "ema" },
    };
    write_json(&dir.join("samples.json"), &meta)?;
    Ok(meta)
}
