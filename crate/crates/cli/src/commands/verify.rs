use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::Serialize;

use nudiff_core::verify::{run_suite, SuiteReport, SUITES};

use super::write_json;
use crate::format::csv_writer;

#[derive(Debug, Clone, Serialize)]
pub struct TimedSuite {
    #[serde(flatten)]
    pub report: SuiteReport,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutcome {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<TimedSuite>,
}

impl VerifyOutcome {
    /// `suite: check (value vs threshold)` for every failed check.
    pub fn failures(&self) -> Vec<String> {
        self.suites
            .iter()
            .flat_map(|s| {
                s.report
                    .failures()
                    .map(|c| format!("{}: {} (value {:e}, threshold {:e})", s.report.suite, c.name, c.value, c.threshold))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Expands selectors; an empty list or `all` selects every suite.
pub fn resolve_selectors(selectors: &[String]) -> Result<Vec<&'static str>> {
    if selectors.is_empty() || selectors.iter().any(|s| s == "all") {
        return Ok(SUITES.to_vec());
    }
    let mut out = Vec::new();
    for s in selectors {
        match SUITES.iter().find(|name| **name == s.as_str()) {
            Some(name) if !out.contains(name) => out.push(*name),
            Some(_) => {}
            None => bail!("unknown suite {s:?}; available: all, {}", SUITES.join(", ")),
        }
    }
    Ok(out)
}

/// Runs the selected oracle suites, writing `verify.json` and `verify.csv`
/// into `out` when given.
pub fn verify(selectors: &[String], seed: u64, out: Option<&Path>, config_hash: Option<&str>) -> Result<VerifyOutcome> {
    let names = resolve_selectors(selectors)?;
    let suites = names
        .par_iter()
        .map(|name| -> Result<TimedSuite> {
            let started = Instant::now();
            let report = run_suite(name, seed)?;
            Ok(TimedSuite {
                passed: report.passed(),
                report,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = VerifyOutcome {
        seed,
        passed: suites.iter().all(|s| s.passed),
        suites,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("verify.json"), &outcome)?;
        let mut w = csv_writer(&dir.join("verify.csv"), config_hash.unwrap_or("none"), seed)?;
        w.write_record(["suite", "check", "value", "threshold", "passed"])?;
        for s in &outcome.suites {
            for c in &s.report.checks {
                w.serialize((&s.report.suite, &c.name, c.value, c.threshold, c.passed))?;
            }
        }
        w.flush()?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selectors_expand_and_reject_unknown_names() {
        assert_eq!(resolve_selectors(&[]).unwrap(), SUITES.to_vec());
        assert_eq!(resolve_selectors(&["all".into()]).unwrap(), SUITES.to_vec());
        assert_eq!(resolve_selectors(&["haar".into(), "haar".into()]).unwrap(), vec!["haar"]);
        let msg = resolve_selectors(&["nope".into()]).unwrap_err().to_string();
        assert!(msg.contains("nope") && msg.contains("haar") && msg.contains("kernel"), "{msg}");
    }
}
