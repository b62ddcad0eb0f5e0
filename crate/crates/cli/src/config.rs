use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dssync::analysis::CostModel;
use dssync::comm::Topology;
use dssync::optim::OptimizerConfig;
use dssync::problems::{Problem, ProblemSpec};
use dssync::schedule::WorldConfig;
use dssync::sync::{LrSchedule, Sampling, SyncKind, SyncStrategy, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Learning-rate schedule as written in a config. The theorem schedule may
/// leave `mu` and `gamma` out; they are then taken from the problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        rate: f64,
    },
    StepDecay {
        rate: f64,
        factor: f64,
        every: usize,
    },
    Theorem {
        #[serde(default)]
        mu: Option<f64>,
        #[serde(default)]
        gamma: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    #[default]
    Lockstep,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub data_size: f64,
    pub bandwidth: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            data_size: 1.0,
            bandwidth: 1.0,
        }
    }
}

fn one() -> usize {
    1
}

fn ring() -> Topology {
    Topology::Ring
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: SyncKind,
    #[serde(default = "ring")]
    pub topology: Topology,
    pub world_size: usize,
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default = "one")]
    pub servers: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub lr_schedule: ScheduleSpec,
    pub problem: ProblemSpec,
    pub iterations: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub sampling: Sampling,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// A validated config with everything built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub problem: Problem<f64>,
    pub training: TrainingConfig,
    pub cost: CostModel,
}

impl Prepared {
    pub fn training_for(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            seed: dssync::Seed(seed),
            ..self.training.clone()
        }
    }

    /// Simulated time of a synchronization with `steps` serial steps.
    pub fn comm_time(&self, steps: usize) -> f64 {
        let members = self.training.strategy.group_size();
        self.cost.overall_cost(self.config.topology, steps, members)
    }
}

fn reject(field: &str, rule: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("config.{field}: {rule}"))
}

/// Library validation errors without their generic prefix.
pub(crate) fn rule(e: dssync::Error) -> String {
    match e {
        dssync::Error::InvalidConfig(m) => m,
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid: {e}")))
    }

    /// Group size the collective runs over.
    pub fn effective_group_size(&self) -> usize {
        match self.strategy {
            SyncKind::Bsp => self.world_size,
            SyncKind::DsSync => self.group_size.unwrap_or(0),
        }
    }

    fn strategy(&self) -> Result<SyncStrategy, CliError> {
        if self.world_size == 0 {
            return Err(reject("world_size", "must be >= 1"));
        }
        let strategy = match self.strategy {
            SyncKind::Bsp => {
                if let Some(n) = self.group_size {
                    if n != self.world_size {
                        return Err(reject(
                            "group_size",
                            format!("bsp synchronizes all workers, group_size must be omitted or equal world_size ({n} != {})", self.world_size),
                        ));
                    }
                }
                SyncStrategy::bsp(self.world_size, Topology::Ring)
            }
            SyncKind::DsSync => {
                let n = self.group_size.ok_or_else(|| reject("group_size", "required for ds-sync"))?;
                let cfg = WorldConfig::new(self.world_size, n).map_err(|e| reject("group_size", rule(e)))?;
                SyncStrategy::ds_sync(cfg, Topology::Ring)
            }
        }
        .map_err(|e| reject("world_size", rule(e)))?;
        if self.servers == 0 {
            return Err(reject("servers", "must be >= 1"));
        }
        let n = strategy.group_size();
        if self.topology == Topology::Tree && !n.is_power_of_two() {
            return Err(reject(
                "group_size",
                format!("tree topology requires the group size to be a power of two, got {n}"),
            ));
        }
        let mut strategy = strategy;
        strategy.collective.topology = self.topology;
        strategy.collective.servers = self.servers;
        strategy.validate().map_err(|e| reject("topology", rule(e)))?;
        Ok(strategy)
    }

    fn schedule(&self, problem: &Problem<f64>) -> Result<LrSchedule, CliError> {
        let schedule = match self.lr_schedule {
            ScheduleSpec::Constant { rate } => LrSchedule::Constant { rate },
            ScheduleSpec::StepDecay { rate, factor, every } => LrSchedule::StepDecay { rate, factor, every },
            ScheduleSpec::Theorem { mu, gamma } => {
                let known = problem.constants();
                let mu = match (mu, known) {
                    (Some(mu), _) => mu,
                    (None, Some((mu, _))) => mu,
                    (None, None) => {
                        return Err(reject(
                            "lr_schedule.mu",
                            "required: the problem has no known strong-convexity constant",
                        ))
                    }
                };
                let gamma = match (gamma, known) {
                    (Some(g), _) => g,
                    (None, Some((_, l))) => (8.0 * l / mu).max(2.0),
                    (None, None) => {
                        return Err(reject(
                            "lr_schedule.gamma",
                            "required: the problem has no known smoothness constant",
                        ))
                    }
                };
                LrSchedule::Theorem { mu, gamma }
            }
        };
        schedule.validate().map_err(|e| reject("lr_schedule", rule(e)))?;
        Ok(schedule)
    }

    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let strategy = self.strategy()?;
        if self.iterations == 0 {
            return Err(reject("iterations", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(reject("batch_size", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(reject("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(reject("seeds", "seeds must be distinct (one metrics file per seed)"));
        }
        self.optimizer
            .validate()
            .map_err(|e| CliError::Config(format!("config.{}", rule(e))))?;
        let cost = CostModel::new(self.cost.data_size, self.cost.bandwidth, self.servers)
            .map_err(|e| reject("cost", rule(e)))?;
        let problem = self.problem.build::<f64>().map_err(|e| match rule(e) {
            m if m.starts_with("problem.") => CliError::Config(format!("config.{m}")),
            m => reject("problem", m),
        })?;
        if let Some(m) = problem.dataset_len() {
            if m < self.world_size {
                return Err(reject(
                    "problem.M",
                    format!("dataset has {m} examples, fewer than world_size={}", self.world_size),
                ));
            }
        }
        let schedule = self.schedule(&problem)?;
        let mut training = TrainingConfig::new(strategy, self.optimizer, schedule, self.iterations);
        training.batch_size = self.batch_size;
        training.sampling = self.sampling;
        training.parallel = self.execution == Execution::Parallel;
        Ok(Prepared {
            config: self.clone(),
            problem,
            training,
            cost,
        })
    }
}
