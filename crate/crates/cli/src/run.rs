use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dssync::sync::{run_training, TrainingRun};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Prepared, RunConfig};
use crate::CliError;

/// One row of a per-seed metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub mean_post_sync_loss: f64,
    pub suboptimality: Option<f64>,
    pub critical_path_steps: usize,
    pub total_messages: usize,
    pub simulated_comm_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics_file: String,
    pub final_loss: f64,
    pub final_suboptimality: Option<f64>,
    pub total_critical_path_steps: usize,
    pub total_comm_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub final_loss: Spread,
    pub final_suboptimality: Option<Spread>,
    pub seeds: Vec<SeedSummary>,
}

/// Runs every seed of the config, `threads` seeds at a time, in seed order.
pub fn train_seeds(
    prepared: &Prepared,
    threads: usize,
    record_detail: bool,
) -> Result<Vec<(u64, TrainingRun<f64>)>, CliError> {
    train_seed_list(prepared, &prepared.config.seeds, threads, record_detail)
}

pub fn train_seed_list(
    prepared: &Prepared,
    seeds: &[u64],
    threads: usize,
    record_detail: bool,
) -> Result<Vec<(u64, TrainingRun<f64>)>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut cfg = prepared.training_for(seed);
                cfg.record_detail = record_detail;
                let run = run_training(&prepared.problem, &cfg).map_err(|e| match e {
                    dssync::Error::Divergence { .. } => CliError::Divergence(format!("seed {seed}: {e}")),
                    other => CliError::from(other),
                })?;
                Ok((seed, run))
            })
            .collect()
    })
}

pub fn metrics_rows(prepared: &Prepared, run: &TrainingRun<f64>) -> Vec<MetricsRow> {
    run.traces
        .iter()
        .map(|tr| MetricsRow {
            t: tr.t,
            mean_post_sync_loss: tr.mean_post_sync_loss(),
            suboptimality: tr.suboptimality,
            critical_path_steps: tr.critical_path_steps,
            total_messages: tr.messages,
            simulated_comm_time: prepared.comm_time(tr.critical_path_steps),
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}

/// Writes next to the target and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::Io(format!("{}: {e}", tmp.display())))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn metrics_file_name(seed: u64) -> String {
    format!("metrics_seed{seed}.csv")
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
}

/// Output directory: the flag, else the config's `output`, else `./out`.
pub fn output_dir(config: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn cmd_run(config_path: &Path, out: Option<&Path>, threads: usize) -> Result<RunOutcome, CliError> {
    let config = RunConfig::load(config_path)?;
    let prepared = config.prepare()?;
    let dir = output_dir(&config, out);
    let runs = train_seeds(&prepared, threads, false)?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;

    let mut seeds = Vec::with_capacity(runs.len());
    for (seed, run) in &runs {
        let rows = metrics_rows(&prepared, run);
        let name = metrics_file_name(*seed);
        write_atomic(&dir.join(&name), &metrics_csv(&rows)?)?;
        let last = rows
            .last()
            .ok_or_else(|| CliError::Runtime("run produced no iterations".into()))?;
        seeds.push(SeedSummary {
            seed: *seed,
            metrics_file: name,
            final_loss: last.mean_post_sync_loss,
            final_suboptimality: last.suboptimality,
            total_critical_path_steps: rows.iter().map(|r| r.critical_path_steps).sum(),
            total_comm_time: rows.iter().map(|r| r.simulated_comm_time).sum(),
        });
    }
    let losses: Vec<f64> = seeds.iter().map(|s| s.final_loss).collect();
    let subopt: Option<Vec<f64>> = seeds.iter().map(|s| s.final_suboptimality).collect();
    let summary = Summary {
        config,
        final_loss: Spread::of(&losses),
        final_suboptimality: subopt.map(|v| Spread::of(&v)),
        seeds,
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Runtime(format!("summary: {e}")))?;
    write_atomic(&dir.join("summary.json"), &json)?;
    Ok(RunOutcome { dir, summary })
}
