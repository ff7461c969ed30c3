use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use nudiff_core::conditional::GaussianJoint;
use nudiff_core::image::Image;
use nudiff_core::linalg::{mat_mul, select, Cholesky};
use nudiff_core::metrics::{diversity, psnr, sliced_wasserstein, EvalReport};
use nudiff_core::rng::{fill_normal, stream};
use nudiff_core::synthdata::{apply_operator, DatasetSampler};

use super::{write_json, Run};
use crate::format::{csv_writer, derive_seed, read_rows, read_tensor, Tensor};

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Defaults to `samples.ndt` in the output directory.
    pub samples: Option<PathBuf>,
    /// Ground-truth rows for PSNR and consistency; row `i` is compared with
    /// sample `i` (modulo the number of rows), or with every sample of
    /// condition row `i` for conditional runs.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub seed: u64,
    pub samples: PathBuf,
    pub report: EvalReport,
    /// Every metric in `metrics.csv` order.
    pub metrics: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// Compares generated samples with fresh draws from the data distribution
/// (or the exact Gaussian posterior for conditional runs) and writes
/// `eval.json` and `metrics.csv`.
pub fn eval(run: &Run, opts: &EvalOptions) -> Result<EvalOutput> {
    let cfg = &run.config;
    let path = opts.samples.clone().unwrap_or_else(|| run.out_dir.join("samples.ndt"));
    let tensor = read_tensor(&path)?;
    let reference = opts.reference.as_ref().map(|p| read_tensor(p)).transpose()?;
    let eval_seed = derive_seed(run.seed, "eval");
    let mut metrics = Vec::new();
    let report = match &cfg.estimator {
        None => unconditional(run, &tensor, reference.as_ref(), eval_seed, &mut metrics)?,
        Some(_) => conditional(run, &tensor, reference.as_ref(), eval_seed, &mut metrics)?,
    };

    let dir = run.ensure_out_dir()?;
    let mut w = csv_writer(&dir.join("metrics.csv"), &cfg.hash, run.seed)?;
    w.write_record(["metric", "value"])?;
    for (name, value) in &metrics {
        w.serialize((name, value))?;
    }
    w.flush()?;
    let out = EvalOutput {
        config_hash: cfg.hash.clone(),
        seed: run.seed,
        samples: path,
        report,
        metrics: metrics.into_iter().map(|(name, value)| Metric { name, value }).collect(),
    };
    write_json(&dir.join("eval.json"), &out)?;
    Ok(out)
}

fn moments(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for row in x.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

fn moment_errors(x: &[f64], reference: &[f64], d: usize) -> (f64, f64) {
    let (m, c) = moments(x, d);
    let (mr, cr) = moments(reference, d);
    let mean_err = m.iter().zip(&mr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let num: f64 = c.iter().zip(&cr).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = cr.iter().map(|v| v * v).sum();
    (mean_err, (num / den).sqrt())
}

fn mean_psnr(rows: &[&[f64]], reference: &[f64], width: usize, peak: f64) -> Result<f64> {
    let refs: Vec<&[f64]> = reference.chunks(width).collect();
    let mut total = 0.0;
    for (i, r) in rows.iter().enumerate() {
        total += psnr(r, refs[i % refs.len()], peak)?;
    }
    Ok(total / rows.len() as f64)
}

fn reference_width(reference: &Tensor, width: usize) -> Result<()> {
    ensure!(
        !reference.data.is_empty() && reference.data.len().is_multiple_of(width),
        "reference tensor {:?} does not hold rows of {width} values",
        reference.shape
    );
    Ok(())
}

fn unconditional(
    run: &Run,
    tensor: &Tensor,
    reference: Option<&Tensor>,
    eval_seed: u64,
    metrics: &mut Vec<(String, f64)>,
) -> Result<EvalReport> {
    let cfg = &run.config;
    let ev = &cfg.eval;
    let d = cfg.data.dim();
    let n = tensor.shape.first().copied().unwrap_or(0);
    ensure!(
        tensor.data.len() == n * d,
        "sample tensor {:?} does not match data dimension {d}",
        tensor.shape
    );
    ensure!(n >= 2, "evaluation needs at least two samples, found {n}");
    let x = &tensor.data;
    let sampler = DatasetSampler::new(cfg.data.dataset.clone())?;
    let ref_a = sampler.sample(ev.reference_samples, &mut stream(eval_seed, 0));
    let ref_b = sampler.sample(n, &mut stream(eval_seed, 1));
    let swd = sliced_wasserstein(x, &ref_a, d, ev.projections, &mut stream(eval_seed, 2))?;
    let baseline = sliced_wasserstein(&ref_b, &ref_a, d, ev.projections, &mut stream(eval_seed, 2))?;
    let (mean_err, cov_err) = moment_errors(x, &ref_a, d);
    let rows: Vec<&[f64]> = x.chunks(d).collect();
    let div = diversity(&rows)?;
    metrics.extend([
        ("n_samples".to_string(), n as f64),
        ("swd".into(), swd),
        ("swd_reference_baseline".into(), baseline),
        ("swd_ratio".into(), swd / baseline),
        ("mean_max_abs_error".into(), mean_err),
        ("cov_rel_frobenius_error".into(), cov_err),
        ("diversity".into(), div),
    ]);
    let mut report = EvalReport {
        psnr: None,
        consistency_psnr: None,
        diversity: Some(div),
        swd: Some(swd),
        kl_bound_pair: None,
    };
    if let Some(reference) = reference {
        reference_width(reference, d)?;
        let p = mean_psnr(&rows, &reference.data, d, ev.peak)?;
        metrics.push(("psnr".into(), p));
        report.psnr = Some(p);
        if let (Some(op), Some((c, h, w))) = (&ev.operator, cfg.data.image_shape) {
            let refs: Vec<&[f64]> = reference.data.chunks(d).collect();
            let mut total = 0.0;
            for (i, row) in rows.iter().enumerate() {
                let rng = stream(eval_seed, 1000 + i as u64);
                let a = apply_operator(op, &Image::new(c, h, w, row.to_vec())?, &mut rng.clone())?;
                let b = apply_operator(op, &Image::new(c, h, w, refs[i % refs.len()].to_vec())?, &mut rng.clone())?;
                total += psnr(&a.data, &b.data, ev.peak)?;
            }
            let cons = total / n as f64;
            metrics.push(("consistency_psnr".into(), cons));
            report.consistency_psnr = Some(cons);
        }
    }
    Ok(report)
}

/// Exact Gaussian posterior `x | y`: mean and Cholesky factor of the
/// covariance `S_xx - S_xy S_yy^{-1} S_yx`.
fn posterior(joint: &GaussianJoint, y: &[f64]) -> Result<(Vec<f64>, Cholesky)> {
    let (nx, ny) = (joint.n_x(), joint.n_y());
    let d = nx + ny;
    let xs: Vec<usize> = (0..nx).collect();
    let ys: Vec<usize> = (nx..d).collect();
    let sxx = select(joint.cov(), d, &xs, &xs);
    let sxy = select(joint.cov(), d, &xs, &ys);
    let syx = select(joint.cov(), d, &ys, &xs);
    let syy_inv = Cholesky::factor(&select(joint.cov(), d, &ys, &ys), ny)?.inverse();
    let gain = mat_mul(&sxy, &syy_inv, nx, ny, ny);
    let explained = mat_mul(&gain, &syx, nx, ny, nx);
    let cov: Vec<f64> = sxx.iter().zip(&explained).map(|(a, b)| a - b).collect();
    Ok((joint.posterior_mean(y)?, Cholesky::factor(&cov, nx)?))
}

fn conditional(
    run: &Run,
    tensor: &Tensor,
    reference: Option<&Tensor>,
    eval_seed: u64,
    metrics: &mut Vec<(String, f64)>,
) -> Result<EvalReport> {
    let cfg = &run.config;
    let ev = &cfg.eval;
    let joint = cfg.data.joint().context("conditional runs need joint data")?;
    let nx = joint.n_x();
    let path = cfg
        .sampler
        .condition_file
        .as_ref()
        .context("conditional evaluation needs sampler.condition_file")?;
    if !path.is_file() {
        bail!("condition file {} does not exist", path.display());
    }
    let conditions = read_rows(path)?;
    let [rows, n, width] = tensor.shape[..] else {
        bail!("conditional samples must have shape [conditions, samples, n_x], found {:?}", tensor.shape);
    };
    ensure!(width == nx && rows == conditions.len(), "sample tensor {:?} does not match the config", tensor.shape);
    ensure!(n >= 2, "evaluation needs at least two samples per condition, found {n}");
    if let Some(reference) = reference {
        reference_width(reference, nx)?;
    }

    let (mut swd_sum, mut base_sum, mut bias_sum, mut div_sum, mut psnr_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (r, y) in conditions.iter().enumerate() {
        let x = &tensor.data[r * n * nx..(r + 1) * n * nx];
        let (mu, chol) = posterior(joint, y)?;
        let draw = |count: usize, index: u64| {
            let mut rng = stream(eval_seed, index);
            let mut z = vec![0.0; nx];
            let mut lz = vec![0.0; nx];
            let mut out = Vec::with_capacity(count * nx);
            for _ in 0..count {
                fill_normal(&mut rng, &mut z);
                chol.mul_lower(&z, &mut lz);
                out.extend(lz.iter().zip(&mu).map(|(a, b)| a + b));
            }
            out
        };
        let base = 3 * r as u64;
        let ref_a = draw(ev.reference_samples, base);
        let ref_b = draw(n, base + 1);
        let swd = sliced_wasserstein(x, &ref_a, nx, ev.projections, &mut stream(eval_seed, base + 2))?;
        let baseline = sliced_wasserstein(&ref_b, &ref_a, nx, ev.projections, &mut stream(eval_seed, base + 2))?;
        let (mean, _) = moments(x, nx);
        let gap: f64 = mean.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bias = if scale > 0.0 { gap / scale } else { gap };
        let rows_x: Vec<&[f64]> = x.chunks(nx).collect();
        let div = diversity(&rows_x)?;
        metrics.extend([
            (format!("condition_{r}.swd"), swd),
            (format!("condition_{r}.swd_reference_baseline"), baseline),
            (format!("condition_{r}.posterior_mean_rel_error"), bias),
            (format!("condition_{r}.diversity"), div),
        ]);
        if let Some(reference) = reference {
            let k = reference.data.len() / nx;
            let row = &reference.data[(r % k) * nx..(r % k + 1) * nx];
            let p = mean_psnr(&rows_x, row, nx, ev.peak)?;
            metrics.push((format!("condition_{r}.psnr"), p));
            psnr_sum += p;
        }
        swd_sum += swd;
        base_sum += baseline;
        bias_sum += bias;
        div_sum += div;
    }
    let m = rows as f64;
    metrics.extend([
        ("n_conditions".to_string(), m),
        ("n_samples".into(), n as f64),
        ("swd".into(), swd_sum / m),
        ("swd_reference_baseline".into(), base_sum / m),
        ("swd_ratio".into(), swd_sum / base_sum),
        ("posterior_mean_rel_error".into(), bias_sum / m),
        ("diversity".into(), div_sum / m),
    ]);
    let psnr = reference.map(|_| psnr_sum / m);
    if let Some(p) = psnr {
        metrics.push(("psnr".into(), p));
    }
    Ok(EvalReport {
        psnr,
        consistency_psnr: None,
        diversity: Some(div_sum / m),
        swd: Some(swd_sum / m),
        kl_bound_pair: None,
    })
}
