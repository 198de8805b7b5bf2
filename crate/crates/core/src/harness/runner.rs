//! Parallel multi-seed execution and file emission.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::experiments::{run_seed, SeedOutput};
use super::summary::{summarize, RunSummary, SeedFailure};
use super::table::Table;
use crate::error::{LabError, Result};

/// `<out>/<experiment>/`.
pub fn experiment_dir(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join(config.experiment.as_str())
}

fn seed_file(dir: &Path, seed: u64, suffix: &str, ext: &str) -> PathBuf {
    dir.join(format!("seed{seed}{suffix}.{ext}"))
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".to_string())
}

/// Validates `config`, runs every seed (in parallel), writes one CSV per
/// seed and table plus `summary.json`, and returns the summary. A failing
/// or panicking seed does not stop the others; it is recorded as a hard
/// failure.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    let mut config = config.clone();
    config.validate()?;
    let started = Instant::now();
    let dir = experiment_dir(&config);
    if config.emit.csv || config.emit.json {
        std::fs::create_dir_all(&dir).map_err(|e| LabError::Config {
            key: "out_dir".into(),
            reason: format!("cannot create {}: {e}", dir.display()),
        })?;
    }

    let results: Vec<(u64, std::thread::Result<Result<SeedOutput>>)> = config
        .seeds
        .par_iter()
        .map(|&seed| (seed, catch_unwind(AssertUnwindSafe(|| run_seed(&config, seed)))))
        .collect();

    let mut tables: Vec<Table> = Vec::new();
    let mut files = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        let output = match result {
            Ok(Ok(output)) => output,
            Ok(Err(e)) => {
                failures.push(SeedFailure {
                    seed: seed.to_string(),
                    error: e.to_string(),
                });
                continue;
            }
            Err(p) => {
                failures.push(SeedFailure {
                    seed: seed.to_string(),
                    error: format!("panic: {}", panic_message(p.as_ref())),
                });
                continue;
            }
        };
        if config.emit.csv {
            for (suffix, table) in &output.tables {
                let path = seed_file(&dir, seed, suffix, "csv");
                table.write_file(&path)?;
                files.push(path);
            }
            for (suffix, bytes) in &output.blobs {
                let path = dir.join(format!("seed{seed}{suffix}"));
                std::fs::write(&path, bytes)?;
                files.push(path);
            }
        }
        tables.extend(output.tables.into_iter().map(|(_, t)| t));
    }

    let mut summary = summarize(config.experiment, &tables)?;
    summary.config = Some(serde_json::to_value(&config)?);
    for f in &failures {
        summary.hard_failures.push(format!("seed {}: {}", f.seed, f.error));
    }
    summary.failed_seeds = failures;
    summary.files = files;
    summary.wall_clock_secs = started.elapsed().as_secs_f64();
    if config.emit.json {
        let path = dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
        summary.files.push(path);
    }
    Ok(summary)
}
