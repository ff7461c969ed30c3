use std::path::PathBuf;

use anyhow::Result;

use super::{write_json, Run};
use crate::format::csv_writer;
use crate::models::{save, train_all};

/// Trains every model of the run and writes checkpoints plus `loss.csv`
/// with one `model,iteration,loss` row per update.
pub fn train(run: &Run) -> Result<Vec<PathBuf>> {
    let trained = train_all(&run.config, run.seed)?;
    let dir = run.ensure_out_dir()?;
    let mut written = Vec::new();
    for t in &trained {
        written.extend(save(&run.config, run.seed, dir, t)?);
    }
    let loss_path = dir.join("loss.csv");
    let mut w = csv_writer(&loss_path, &run.config.hash, run.seed)?;
    w.write_record(["model", "iteration", "loss"])?;
    for t in &trained {
        for (i, loss) in t.outcome.trace.iter().enumerate() {
            w.serialize((&t.slot.role, i, loss))?;
        }
    }
    w.flush()?;
    written.push(loss_path);
    let summary = serde_json::json!({
        "config_hash": run.config.hash,
        "seed": run.seed,
        "models": trained.iter().map(|t| serde_json::json!({
            "role": t.slot.role,
            "iterations": t.outcome.trace.len(),
            "final_loss": t.outcome.trace.last(),
        })).collect::<Vec<_>>(),
    });
    let summary_path = dir.join("train.json");
    write_json(&summary_path, &summary)?;
    written.push(summary_path);
    Ok(written)
}
