//! Synchronization strategies and the training loop.
//!
//! Each iteration every worker takes one local optimizer step on its own
//! mini-batch, then parameters and running statistics are averaged inside the
//! groups of the current partition. Optimizer state never leaves its worker.
//!
//! The BSP baseline averages gradients over all workers before a shared step;
//! for vanilla SGD this equals averaging parameters over one group of `W`, but
//! for momentum and Adam the two differ and no equivalence is claimed.

use serde::{Deserialize, Serialize};

use crate::comm::{Collective, ExecMode, StepCounter, Topology};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::param::{mean_of, ParamVector, Seed, Stream};
use crate::problems::{make_shards, Batch, Problem, Shard};
use crate::scalar::Scalar;
use crate::schedule::{make_partition, GroupPartition, WorldConfig};

/// One simulated worker. Its random stream at iteration `t` is
/// `seed.worker_stream(rank, t)`, so no generator state is carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState<T> {
    pub rank: usize,
    pub params: ParamVector<T>,
    pub running_stats: ParamVector<T>,
    pub opt: OptimizerState<T>,
    pub shard: Option<Shard>,
    pub seed: Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncKind {
    Bsp,
    DsSync,
}

impl std::fmt::Display for SyncKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bsp => "bsp",
            Self::DsSync => "ds-sync",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncStrategy {
    pub kind: SyncKind,
    pub collective: Collective,
    world: WorldConfig,
}

impl SyncStrategy {
    pub fn bsp(world_size: usize, topology: Topology) -> Result<Self> {
        Self::checked(
            SyncKind::Bsp,
            WorldConfig::single_group(world_size)?,
            Collective::new(topology),
        )
    }

    pub fn ds_sync(cfg: WorldConfig, topology: Topology) -> Result<Self> {
        Self::checked(SyncKind::DsSync, cfg, Collective::new(topology))
    }

    fn checked(kind: SyncKind, world: WorldConfig, collective: Collective) -> Result<Self> {
        let strategy = Self {
            kind,
            collective,
            world,
        };
        strategy.validate()?;
        Ok(strategy)
    }

    pub fn with_servers(mut self, servers: usize) -> Result<Self> {
        self.collective = self.collective.with_servers(servers);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.group_size();
        if self.collective.topology == Topology::Tree && !n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "tree topology requires the group size to be a power of two (group_size={n})"
            )));
        }
        if self.collective.topology == Topology::Ps && self.collective.servers == 0 {
            return Err(Error::InvalidConfig("ps topology requires servers >= 1".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        self.world
    }

    pub fn world_size(&self) -> usize {
        self.world.world_size()
    }

    /// Members per collective.
    pub fn group_size(&self) -> usize {
        self.world.group_size()
    }

    pub fn partition(&self, t: usize) -> GroupPartition {
        match self.kind {
            SyncKind::Bsp => GroupPartition::everyone(t, self.world_size()),
            SyncKind::DsSync => make_partition(&self.world, t),
        }
    }
}

/// Learning rate as a function of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        rate: f64,
    },
    /// `rate * factor^(t / every)`.
    StepDecay {
        rate: f64,
        factor: f64,
        every: usize,
    },
    /// `2 / (mu (gamma + t))`.
    Theorem {
        mu: f64,
        gamma: f64,
    },
}

impl LrSchedule {
    /// The theorem schedule with `gamma = max(8 L / mu, 2)`.
    pub fn theorem(mu: f64, l: f64) -> Self {
        Self::Theorem {
            mu,
            gamma: (8.0 * l / mu).max(2.0),
        }
    }

    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            Self::Constant { rate } => rate,
            Self::StepDecay { rate, factor, every } => rate * factor.powi((t / every.max(1)) as i32),
            Self::Theorem { mu, gamma } => 2.0 / (mu * (gamma + t as f64)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, value: f64| Error::InvalidConfig(format!("lr_schedule.{field} out of range: {value}"));
        match *self {
            Self::Constant { rate } if !(rate >= 0.0 && rate.is_finite()) => Err(bad("rate", rate)),
            Self::StepDecay { rate, .. } if !(rate >= 0.0 && rate.is_finite()) => Err(bad("rate", rate)),
            Self::StepDecay { factor, .. } if !(factor > 0.0 && factor <= 1.0) => Err(bad("factor", factor)),
            Self::StepDecay { every: 0, .. } => Err(bad("every", 0.0)),
            Self::Theorem { mu, .. } if !(mu > 0.0 && mu.is_finite()) => Err(bad("mu", mu)),
            Self::Theorem { gamma, .. } if !(gamma > 0.0 && gamma.is_finite()) => Err(bad("gamma", gamma)),
            _ => Ok(()),
        }
    }

    /// Non-increasing with `rate(t) <= 2 rate(t + 2)` for every `t < horizon`.
    pub fn check_diminishing(&self, horizon: usize) -> Result<()> {
        self.validate()?;
        for t in 0..horizon {
            let (a, b, c) = (self.rate(t), self.rate(t + 1), self.rate(t + 2));
            if b > a {
                return Err(Error::Schedule(format!("learning rate increases at t={t}: {a} -> {b}")));
            }
            if a > 2.0 * c {
                return Err(Error::Schedule(format!(
                    "learning rate violates rate(t) <= 2 rate(t+2) at t={t}: {a} > 2 * {c}"
                )));
            }
        }
        Ok(())
    }
}

/// How workers draw mini-batches from their shard.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Uniform with replacement; the model the convergence checks assume.
    #[default]
    Iid,
    /// A fresh shuffle of the shard each epoch.
    Epoch,
}

/// What a worker computed locally before synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStep<T> {
    pub loss: T,
    pub grad: ParamVector<T>,
}

/// Per-worker values recorded for offline checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerDetail<T> {
    pub rank: usize,
    /// `w_t`, entering the iteration.
    pub params_before: ParamVector<T>,
    /// Stochastic gradient on this worker's batch.
    pub grad: ParamVector<T>,
    /// Full-objective gradient at `w_t`.
    pub exact_grad: ParamVector<T>,
    /// `w_hat - w_t`, the scaled local update.
    pub update: ParamVector<T>,
    /// `w_hat`, after the local step.
    pub local_params: ParamVector<T>,
    /// `w_{t+1}`, after synchronization.
    pub params_after: ParamVector<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace<T> {
    pub t: usize,
    pub learning_rate: f64,
    /// Mini-batch loss of each worker before synchronization.
    pub pre_sync_loss: Vec<f64>,
    /// Full objective at each worker's synchronized parameters.
    pub post_sync_loss: Vec<f64>,
    pub critical_path_steps: usize,
    pub messages: usize,
    /// Mean over all workers of the synchronized parameters.
    pub global_mean_params: ParamVector<T>,
    /// `F(global mean) - F(w*)` when the optimum is known.
    pub suboptimality: Option<f64>,
    pub detail: Option<Vec<WorkerDetail<T>>>,
}

impl<T> IterationTrace<T> {
    pub fn mean_post_sync_loss(&self) -> f64 {
        self.post_sync_loss.iter().sum::<f64>() / self.post_sync_loss.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub strategy: SyncStrategy,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub iterations: usize,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub seed: Seed,
    /// One thread per worker for local steps and per group for collectives.
    pub parallel: bool,
    /// Keep per-worker vectors in every trace.
    pub record_detail: bool,
}

impl TrainingConfig {
    pub fn new(strategy: SyncStrategy, optimizer: OptimizerConfig, schedule: LrSchedule, iterations: usize) -> Self {
        Self {
            strategy,
            optimizer,
            schedule,
            iterations,
            batch_size: 1,
            sampling: Sampling::Iid,
            seed: Seed(0),
            parallel: false,
            record_detail: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun<T> {
    pub initial_params: ParamVector<T>,
    pub traces: Vec<IterationTrace<T>>,
    pub workers: Vec<WorkerState<T>>,
}

fn diverged(error: Error, iteration: usize, worker: usize, loss: f64) -> Error {
    match error {
        Error::NonFinite { .. } => Error::Divergence {
            iteration,
            worker,
            loss,
        },
        other => other,
    }
}

fn local_gradient<T: Scalar>(
    problem: &Problem<T>,
    worker: &WorkerState<T>,
    t: usize,
    batch_size: usize,
    sampling: Sampling,
) -> Result<(LocalStep<T>, ParamVector<T>)> {
    let mut rng = worker.seed.worker_stream(worker.rank, t);
    let batch = match (sampling, &worker.shard) {
        (Sampling::Epoch, Some(shard)) => Batch::Examples(shard.epoch_batch(batch_size, worker.seed, t)?),
        _ => problem.sample_batch(worker.shard.as_ref(), batch_size, &mut rng)?,
    };
    let sample = problem
        .stochastic_gradient(&worker.params, &worker.running_stats, &batch, &mut rng)
        .map_err(|e| diverged(e, t, worker.rank, f64::NAN))?;
    Ok((
        LocalStep {
            loss: sample.loss,
            grad: sample.grad,
        },
        sample.stats,
    ))
}

fn step_with<T: Scalar>(
    worker: &WorkerState<T>,
    grad: &ParamVector<T>,
    stats: ParamVector<T>,
    t: usize,
    rate: f64,
    loss: T,
) -> Result<WorkerState<T>> {
    let mut opt = worker.opt.clone();
    opt.set_learning_rate(T::of(rate))?;
    let (params, opt) = opt
        .apply_step(&worker.params, grad)
        .map_err(|e| diverged(e, t, worker.rank, loss.as_f64()))?;
    Ok(WorkerState {
        params,
        running_stats: stats,
        opt,
        ..worker.clone()
    })
}

/// One local step: sample a batch, take the gradient, apply the optimizer.
/// Returns the worker holding `w_hat = w_t - rate * update`.
pub fn local_iteration<T: Scalar>(
    problem: &Problem<T>,
    worker: &WorkerState<T>,
    t: usize,
    rate: f64,
    batch_size: usize,
    sampling: Sampling,
) -> Result<(WorkerState<T>, LocalStep<T>)> {
    let (step, stats) = local_gradient(problem, worker, t, batch_size, sampling)?;
    let next = step_with(worker, &step.grad, stats, t, rate, step.loss)?;
    Ok((next, step))
}

fn packed<T: Scalar>(worker: &WorkerState<T>) -> ParamVector<T> {
    worker.params.concat(&worker.running_stats)
}

fn average_groups<T: Scalar>(
    partition: &GroupPartition,
    vectors: &[ParamVector<T>],
    collective: Collective,
    parallel: bool,
) -> Result<(Vec<ParamVector<T>>, StepCounter)> {
    let run = |group: &Vec<usize>, collective: Collective| {
        let inputs: Vec<ParamVector<T>> = group.iter().map(|&r| vectors[r].clone()).collect();
        collective.allreduce_avg(group, &inputs)
    };
    let results: Vec<Result<(Vec<ParamVector<T>>, StepCounter)>> = if parallel {
        let threaded = collective.with_mode(ExecMode::Threaded);
        std::thread::scope(|scope| {
            let handles: Vec<_> = partition
                .groups
                .iter()
                .map(|g| scope.spawn(move || run(g, threaded)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Collective("group thread panicked".into())))
                })
                .collect()
        })
    } else {
        partition.groups.iter().map(|g| run(g, collective)).collect()
    };
    let mut out: Vec<Option<ParamVector<T>>> = vec![None; vectors.len()];
    let mut counter = StepCounter::default();
    for (group, result) in partition.groups.iter().zip(results) {
        let (means, steps) = result?;
        counter = counter.concurrent(steps);
        for (&rank, mean) in group.iter().zip(means) {
            out[rank] = Some(mean);
        }
    }
    let out = out
        .into_iter()
        .enumerate()
        .map(|(rank, v)| v.ok_or_else(|| Error::Collective(format!("worker {rank} is in no group"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, counter))
}

fn sync_workers<T: Scalar>(
    workers: &[WorkerState<T>],
    strategy: &SyncStrategy,
    t: usize,
    parallel: bool,
) -> Result<(Vec<WorkerState<T>>, StepCounter)> {
    let w = strategy.world_size();
    if workers.len() != w {
        return Err(Error::LengthMismatch {
            expected: w,
            found: workers.len(),
        });
    }
    if let Some((rank, _)) = workers.iter().enumerate().find(|(i, wk)| wk.rank != *i) {
        return Err(Error::Collective(format!(
            "worker at position {rank} has rank {}",
            workers[rank].rank
        )));
    }
    let partition = strategy.partition(t);
    if !partition.is_valid_for(w) {
        return Err(Error::InvalidConfig(format!("invalid partition at t={t}")));
    }
    let vectors: Vec<ParamVector<T>> = workers.iter().map(packed).collect();
    let (means, counter) = average_groups(&partition, &vectors, strategy.collective, parallel)?;
    let synced = workers
        .iter()
        .zip(means)
        .map(|(worker, mean)| {
            let (params, running_stats) = mean.split_at(worker.params.len());
            WorkerState {
                params,
                running_stats,
                ..worker.clone()
            }
        })
        .collect();
    Ok((synced, counter))
}

/// Averages parameters and running statistics within each group of the
/// strategy's partition at `t` (all workers for BSP). Optimizer states are
/// carried over untouched.
pub fn sync_round<T: Scalar>(
    workers: &[WorkerState<T>],
    strategy: &SyncStrategy,
    t: usize,
) -> Result<(Vec<WorkerState<T>>, StepCounter)> {
    sync_workers(workers, strategy, t, false)
}

fn parallel_map<A: Sync, B: Send>(items: &[A], f: impl Fn(&A) -> Result<B> + Sync) -> Result<Vec<B>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.iter().map(|item| scope.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Collective("worker thread panicked".into())))
            })
            .collect()
    })
}

type Stepped<T> = Vec<(WorkerState<T>, LocalStep<T>)>;

/// Steps a training run one iteration at a time.
#[derive(Debug, Clone)]
pub struct Trainer<'a, T> {
    problem: &'a Problem<T>,
    config: TrainingConfig,
    workers: Vec<WorkerState<T>>,
    initial_params: ParamVector<T>,
    t: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// All workers start from the same parameters; data is split into one shard per worker.
    pub fn new(problem: &'a Problem<T>, config: TrainingConfig) -> Result<Self> {
        let params = problem.initial_params(config.seed)?;
        Self::starting_from(problem, config, params)
    }

    pub fn starting_from(problem: &'a Problem<T>, config: TrainingConfig, params: ParamVector<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != problem.param_len() {
            return Err(Error::LengthMismatch {
                expected: problem.param_len(),
                found: params.len(),
            });
        }
        let w = config.strategy.world_size();
        let shards = match problem.dataset_len() {
            Some(m) => make_shards(m, w, config.seed)?.into_iter().map(Some).collect(),
            None => vec![None; w],
        };
        let opt = OptimizerState::new(config.optimizer, T::of(config.schedule.rate(0)))?;
        let workers = shards
            .into_iter()
            .enumerate()
            .map(|(rank, shard)| WorkerState {
                rank,
                params: params.clone(),
                running_stats: problem.initial_stats(),
                opt: opt.clone(),
                shard,
                seed: config.seed,
            })
            .collect();
        Ok(Self {
            problem,
            config,
            workers,
            initial_params: params,
            t: 0,
        })
    }

    pub fn workers(&self) -> &[WorkerState<T>] {
        &self.workers
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn initial_params(&self) -> &ParamVector<T> {
        &self.initial_params
    }

    fn local_phase(&self, rate: f64) -> Result<Vec<(WorkerState<T>, LocalStep<T>)>> {
        let (t, b, s) = (self.t, self.config.batch_size, self.config.sampling);
        let go = |w: &WorkerState<T>| local_iteration(self.problem, w, t, rate, b, s);
        if self.config.parallel {
            parallel_map(&self.workers, go)
        } else {
            self.workers.iter().map(go).collect()
        }
    }

    /// Gradient averaging over all workers followed by one shared step.
    fn bsp_phase(&self, rate: f64) -> Result<(Stepped<T>, StepCounter)> {
        let (t, b, s) = (self.t, self.config.batch_size, self.config.sampling);
        let go = |w: &WorkerState<T>| local_gradient(self.problem, w, t, b, s);
        let local: Vec<(LocalStep<T>, ParamVector<T>)> = if self.config.parallel {
            parallel_map(&self.workers, go)?
        } else {
            self.workers.iter().map(go).collect::<Result<_>>()?
        };
        let packed: Vec<ParamVector<T>> = local.iter().map(|(step, stats)| step.grad.concat(stats)).collect();
        let partition = self.config.strategy.partition(t);
        let (means, counter) = average_groups(
            &partition,
            &packed,
            self.config.strategy.collective,
            self.config.parallel,
        )?;
        let next = self
            .workers
            .iter()
            .zip(local)
            .zip(means)
            .map(|((worker, (step, _)), mean)| {
                let (grad, stats) = mean.split_at(worker.params.len());
                Ok((step_with(worker, &grad, stats, t, rate, step.loss)?, step))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((next, counter))
    }

    pub fn step(&mut self) -> Result<IterationTrace<T>> {
        let t = self.t;
        let rate = self.config.schedule.rate(t);
        let parallel = self.config.parallel;
        let (local, counter, synced) = match self.config.strategy.kind {
            SyncKind::DsSync => {
                let local = self.local_phase(rate)?;
                let hat: Vec<WorkerState<T>> = local.iter().map(|(w, _)| w.clone()).collect();
                let (synced, counter) = sync_workers(&hat, &self.config.strategy, t, parallel)?;
                (local, counter, synced)
            }
            SyncKind::Bsp => {
                let (local, counter) = self.bsp_phase(rate)?;
                let synced = local.iter().map(|(w, _)| w.clone()).collect();
                (local, counter, synced)
            }
        };

        let pre_sync_loss: Vec<f64> = local.iter().map(|(_, s)| s.loss.as_f64()).collect();
        let post_sync_loss = self.group_losses(t, &synced)?;
        if let Some((worker, &loss)) = post_sync_loss.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                worker,
                loss,
            });
        }
        let global_mean_params = mean_of(synced.iter().map(|w| &w.params))?;
        let suboptimality = match self.problem.optimum() {
            Some(_) => Some(self.problem.true_suboptimality(&global_mean_params)?.as_f64()),
            None => None,
        };
        let detail = if self.config.record_detail {
            Some(
                self.workers
                    .iter()
                    .zip(&local)
                    .zip(&synced)
                    .map(|((before, (hat, step)), after)| {
                        Ok(WorkerDetail {
                            rank: before.rank,
                            params_before: before.params.clone(),
                            grad: step.grad.clone(),
                            exact_grad: self.problem.exact_gradient(&before.params)?.1,
                            update: hat.params.sub(&before.params)?,
                            local_params: hat.params.clone(),
                            params_after: after.params.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        self.workers = synced;
        self.t += 1;
        Ok(IterationTrace {
            t,
            learning_rate: rate,
            pre_sync_loss,
            post_sync_loss,
            critical_path_steps: counter.serial_steps,
            messages: counter.total_messages,
            global_mean_params,
            suboptimality,
            detail,
        })
    }

    /// Full objective per worker, evaluated once per group since members agree.
    fn group_losses(&self, t: usize, workers: &[WorkerState<T>]) -> Result<Vec<f64>> {
        let mut losses = vec![f64::NAN; workers.len()];
        for group in &self.config.strategy.partition(t).groups {
            let first = &workers[group[0]];
            let loss = self
                .problem
                .loss(&first.params)
                .map_err(|e| diverged(e, t, first.rank, f64::NAN))?;
            for &rank in group {
                losses[rank] = if workers[rank].params == first.params {
                    loss.as_f64()
                } else {
                    self.problem.loss(&workers[rank].params)?.as_f64()
                };
            }
        }
        Ok(losses)
    }

    pub fn finish(self) -> Vec<WorkerState<T>> {
        self.workers
    }
}

/// Runs `config.iterations` iterations from identical initial parameters.
pub fn run_training<T: Scalar>(problem: &Problem<T>, config: &TrainingConfig) -> Result<TrainingRun<T>> {
    run_from(Trainer::new(problem, config.clone())?)
}

/// As [`run_training`], starting every worker from `params`.
pub fn run_training_from<T: Scalar>(
    problem: &Problem<T>,
    config: &TrainingConfig,
    params: ParamVector<T>,
) -> Result<TrainingRun<T>> {
    run_from(Trainer::starting_from(problem, config.clone(), params)?)
}

fn run_from<T: Scalar>(mut trainer: Trainer<'_, T>) -> Result<TrainingRun<T>> {
    let initial_params = trainer.initial_params().clone();
    let traces = (0..trainer.config.iterations)
        .map(|_| trainer.step())
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingRun {
        initial_params,
        traces,
        workers: trainer.finish(),
    })
}

/// A random starting point shared by all workers, drawn from the initialization stream.
pub fn random_start<T: Scalar>(len: usize, std: f64, seed: Seed) -> Result<ParamVector<T>> {
    let mut rng = seed.stream(Stream::Init, 0, 1);
    ParamVector::new((0..len).map(|_| crate::param::gaussian::<T>(&mut rng, std)).collect())
}
