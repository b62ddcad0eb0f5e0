use std::path::Path;

use dssync::analysis::{
    check_divergence_lemma, check_expansion, check_paired_runs, check_partitions, check_theorem, check_variance_lemma,
    max_gradient_norm, CheckReport, ConvexityConstants,
};
use dssync::optim::OptimizerKind;
use dssync::problems::ProblemKind;
use dssync::schedule::WorldConfig;
use dssync::sq_dist;
use dssync::sync::{LrSchedule, SyncKind, SyncStrategy, TrainingRun};
use serde::{Deserialize, Serialize};

use crate::config::{Prepared, RunConfig};
use crate::run::train_seed_list;
use crate::CliError;

pub const EQ2_TOLERANCE: f64 = 1e-10;
pub const BSP_EQUIV_TOLERANCE: f64 = 1e-12;
/// Seeds needed by the seed-averaged checks.
pub const MIN_SEEDS: usize = 30;
/// Extra seeds used only to calibrate the gradient-norm bound G.
pub const CALIBRATION_SEEDS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckName {
    Variance,
    Divergence,
    Theorem,
    Mixing,
    Eq2,
    BspEquiv,
}

impl std::str::FromStr for CheckName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            CliError::Config(format!(
                "unknown check {s:?}; expected one of variance, divergence, theorem, mixing, eq2, bsp-equiv"
            ))
        })
    }
}

fn incompatible(check: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("check {check}: {why}"))
}

fn seeded(runs: &[(u64, TrainingRun<f64>)]) -> Vec<(u64, &TrainingRun<f64>)> {
    runs.iter().map(|(s, r)| (*s, r)).collect()
}

/// Calibration seeds follow the largest configured seed so they never overlap.
pub fn calibration_seeds(seeds: &[u64]) -> Vec<u64> {
    let start = seeds.iter().max().map_or(0, |m| m.wrapping_add(1));
    (0..CALIBRATION_SEEDS).map(|k| start.wrapping_add(k)).collect()
}

fn calibrated_constants(check: &str, prepared: &Prepared, threads: usize) -> Result<ConvexityConstants, CliError> {
    let (mu, l) = prepared.problem.constants().ok_or_else(|| {
        incompatible(
            check,
            "needs a problem with known mu and L (quadratic or logistic with L2)",
        )
    })?;
    let calib = train_seed_list(prepared, &calibration_seeds(&prepared.config.seeds), threads, true)?;
    let g = max_gradient_norm(&calib.iter().map(|(_, r)| r).collect::<Vec<_>>())?;
    Ok(ConvexityConstants::new(l, mu, prepared.config.problem.sigma, g)?)
}

fn require_seeds(check: &str, config: &RunConfig) -> Result<(), CliError> {
    if config.seeds.len() < MIN_SEEDS {
        return Err(incompatible(
            check,
            format!("needs at least {MIN_SEEDS} seeds, config has {}", config.seeds.len()),
        ));
    }
    Ok(())
}

fn require_vanilla(check: &str, config: &RunConfig) -> Result<(), CliError> {
    if config.optimizer.kind != OptimizerKind::VanillaSgd {
        return Err(incompatible(check, "requires optimizer vanilla-sgd"));
    }
    Ok(())
}

fn variance(prepared: &Prepared, threads: usize) -> Result<CheckReport, CliError> {
    if prepared.problem.kind() != ProblemKind::Quadratic {
        return Err(incompatible(
            "variance",
            "requires a quadratic problem (its noise level sigma is known)",
        ));
    }
    let runs = train_seed_list(prepared, &prepared.config.seeds, threads, true)?;
    Ok(check_variance_lemma(
        &seeded(&runs),
        &prepared.training.strategy,
        prepared.config.problem.sigma,
    )?)
}

fn divergence(prepared: &Prepared, threads: usize) -> Result<CheckReport, CliError> {
    require_seeds("divergence", &prepared.config)?;
    let constants = calibrated_constants("divergence", prepared, threads)?;
    let runs = train_seed_list(prepared, &prepared.config.seeds, threads, true)?;
    Ok(check_divergence_lemma(
        &seeded(&runs),
        &prepared.training.strategy,
        &constants,
        &prepared.training.schedule,
    )?)
}

fn theorem(prepared: &Prepared, threads: usize) -> Result<CheckReport, CliError> {
    if prepared.problem.kind() != ProblemKind::Quadratic {
        return Err(incompatible("theorem", "requires a quadratic problem"));
    }
    if !matches!(prepared.training.schedule, LrSchedule::Theorem { .. }) {
        return Err(incompatible("theorem", "requires lr_schedule kind theorem"));
    }
    require_seeds("theorem", &prepared.config)?;
    let constants = calibrated_constants("theorem", prepared, threads)?;
    if prepared.training.schedule != constants.schedule() {
        return Err(incompatible(
            "theorem",
            format!(
                "lr_schedule must use the problem's mu and gamma, expected {:?}",
                constants.schedule()
            ),
        ));
    }
    let runs = train_seed_list(prepared, &prepared.config.seeds, threads, true)?;
    let w0 = &runs[0].1.initial_params;
    let (wstar, _) = prepared
        .problem
        .optimum()
        .ok_or_else(|| incompatible("theorem", "problem has no optimum"))?;
    let delta0 = sq_dist(w0, &wstar)?;
    let initial = prepared.problem.true_suboptimality(w0)?;
    Ok(check_theorem(
        &seeded(&runs),
        initial,
        &constants,
        prepared.training.strategy.group_size(),
        delta0,
    )?)
}

fn mixing(prepared: &Prepared) -> Result<CheckReport, CliError> {
    if prepared.config.strategy != SyncKind::DsSync || prepared.training.strategy.world().is_single_group() {
        return Err(incompatible(
            "mixing",
            "requires ds-sync with world_size == group_size^2",
        ));
    }
    Ok(check_partitions(
        &[prepared.config.world_size],
        prepared.config.iterations,
    )?)
}

fn eq2(prepared: &Prepared) -> Result<CheckReport, CliError> {
    if prepared.config.strategy != SyncKind::DsSync {
        return Err(incompatible("eq2", "requires strategy ds-sync"));
    }
    require_vanilla("eq2", &prepared.config)?;
    if prepared.config.iterations < 2 {
        return Err(incompatible("eq2", "needs at least 2 iterations"));
    }
    let mut reports = Vec::new();
    for (seed, run) in train_seed_list(prepared, &prepared.config.seeds, 1, true)? {
        let mut r = check_expansion(&run, &prepared.training.strategy, EQ2_TOLERANCE)?;
        r.seeds = vec![seed];
        reports.push(r);
    }
    Ok(merge(reports))
}

fn bsp_equiv(prepared: &Prepared, threads: usize) -> Result<CheckReport, CliError> {
    require_vanilla("bsp-equiv", &prepared.config)?;
    let w = prepared.config.world_size;
    let collective = prepared.training.strategy.collective;
    let mut bsp = SyncStrategy::bsp(w, collective.topology)?;
    let mut single = SyncStrategy::ds_sync(WorldConfig::single_group(w)?, collective.topology)?;
    bsp.collective = collective;
    single.collective = collective;
    let with = |strategy: SyncStrategy| Prepared {
        training: dssync::sync::TrainingConfig {
            strategy,
            ..prepared.training.clone()
        },
        ..prepared.clone()
    };
    let a = train_seed_list(&with(bsp), &prepared.config.seeds, threads, false)?;
    let b = train_seed_list(&with(single), &prepared.config.seeds, threads, false)?;
    let mut reports = Vec::new();
    for ((seed, x), (_, y)) in a.iter().zip(&b) {
        let mut r = check_paired_runs(x, y, BSP_EQUIV_TOLERANCE)?;
        r.seeds = vec![*seed];
        reports.push(r);
    }
    Ok(merge(reports))
}

/// Element-wise worst case over per-seed reports of one check.
fn merge(reports: Vec<CheckReport>) -> CheckReport {
    let mut iter = reports.into_iter();
    let mut out = iter.next().expect("at least one seed");
    for r in iter {
        for (o, v) in out.observed_values.iter_mut().zip(&r.observed_values) {
            *o = o.max(*v);
        }
        out.pass &= r.pass;
        out.seeds.extend(r.seeds);
    }
    out.notes.push(format!(
        "observed values are the maximum over {} seeds",
        out.seeds.len()
    ));
    out
}

pub fn run_check(name: CheckName, config: &RunConfig, threads: usize) -> Result<CheckReport, CliError> {
    let prepared = config.prepare()?;
    let report = match name {
        CheckName::Variance => variance(&prepared, threads)?,
        CheckName::Divergence => divergence(&prepared, threads)?,
        CheckName::Theorem => theorem(&prepared, threads)?,
        CheckName::Mixing => mixing(&prepared)?,
        CheckName::Eq2 => eq2(&prepared)?,
        CheckName::BspEquiv => bsp_equiv(&prepared, threads)?,
    };
    Ok(report)
}

/// Runs a check and turns a failing report into an error carrying it.
pub fn cmd_check(name: CheckName, config_path: &Path, threads: usize) -> Result<CheckReport, CliError> {
    let config = RunConfig::load(config_path)?;
    let report = run_check(name, &config, threads)?;
    if report.pass {
        Ok(report)
    } else {
        Err(CliError::CheckFailed(Box::new(report)))
    }
}
