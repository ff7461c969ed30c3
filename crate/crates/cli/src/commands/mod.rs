//! The `train`, `sample`, `eval` and `verify` subcommands.

mod eval;
mod sample;
mod train;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::ExperimentConfig;

pub use eval::{eval, EvalOptions, EvalOutput, Metric};
pub use sample::{sample, SampleMetadata, SampleOptions};
pub use train::train;
pub use verify::{verify, VerifyOutcome};

/// A loaded config with the command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Run {
    /// `seed` and `out` come from flags or the environment and win over the
    /// config file.
    pub fn new(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let config = ExperimentConfig::load(config_path)?;
        let seed = seed.unwrap_or(config.seed);
        let out_dir = out
            .or_else(|| config.out_dir.clone())
            .context("no output directory: pass --out, set NUDIFF_OUT or give out_dir in the config")?;
        Ok(Self { config, seed, out_dir })
    }

    pub fn ensure_out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("cannot create {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
