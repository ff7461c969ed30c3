//! Command-line front end.
//!
//! Global flags may also come from `NUDIFF_CONFIG`, `NUDIFF_SEED`,
//! `NUDIFF_OUT` and `NUDIFF_THREADS`; a flag beats its variable, which beats
//! the config file.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::commands::{self, EvalOptions, Run, SampleOptions};
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "nudiff", version, about = "Non-uniform score-based diffusion experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, env = "NUDIFF_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, env = "NUDIFF_SEED")]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true, env = "NUDIFF_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "NUDIFF_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured score model(s); writes checkpoints and loss.csv.
    Train,
    /// Draw samples; writes samples.ndt and samples.json.
    Sample {
        /// Number of samples (per condition); overrides sampler.n_samples.
        #[arg(long)]
        n: Option<usize>,
        /// Checkpoint directory; defaults to the output directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Use raw instead of EMA weights.
        #[arg(long)]
        raw_weights: bool,
    },
    /// Score samples against the data distribution; writes eval.json and metrics.csv.
    Eval {
        /// Sample tensor; defaults to samples.ndt in the output directory.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Ground-truth tensor for PSNR and consistency.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run oracle suites and print JSON verdicts; `all` or no selector runs every suite.
    Verify {
        selectors: Vec<String>,
    },
}

fn require_run(cli: &Cli) -> Result<Run> {
    let path = cli
        .config
        .as_ref()
        .context("this command needs --config PATH (or NUDIFF_CONFIG)")?;
    Run::new(path, cli.seed, cli.out.clone())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Exit status 0 on success, 1 when verification checks fail, 2 on errors.
pub fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match &cli.command {
        Command::Train => {
            let run = require_run(&cli)?;
            for p in commands::train(&run)? {
                println!("{}", p.display());
            }
        }
        Command::Sample {
            n,
            checkpoints,
            raw_weights,
        } => {
            let run = require_run(&cli)?;
            let opts = SampleOptions {
                n: *n,
                checkpoints: checkpoints.clone(),
                raw_weights: *raw_weights,
            };
            print_json(&commands::sample(&run, &opts)?)?;
        }
        Command::Eval { samples, reference } => {
            let run = require_run(&cli)?;
            let opts = EvalOptions {
                samples: samples.clone(),
                reference: reference.clone(),
            };
            print_json(&commands::eval(&run, &opts)?)?;
        }
        Command::Verify { selectors } => {
            let config = cli.config.as_ref().map(|p| ExperimentConfig::load(p)).transpose()?;
            let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
            let hash = config.as_ref().map(|c| c.hash.as_str());
            let outcome = commands::verify(selectors, seed, cli.out.as_deref(), hash)?;
            print_json(&outcome)?;
            if !outcome.passed {
                for f in outcome.failures() {
                    eprintln!("FAILED {f}");
                }
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
