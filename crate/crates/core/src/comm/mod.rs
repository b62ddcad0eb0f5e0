//! Simulated all-reduce collectives with serial-step accounting.
//!
//! A collective is a set of per-node [`Role`]s that exchange messages in numbered
//! rounds. Round `r` carries step tag `r`, so the largest tag seen is the length
//! of the serial communication chain for one element. Roles are driven either in
//! lockstep on the calling thread or with one thread per node; both produce the
//! same messages and the same results.

mod ps;
mod ring;
mod transport;
mod tree;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use transport::{Endpoint, Message, Network, NodeId};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::scalar::Scalar;

/// Serial steps on the critical path and total messages of one collective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounter {
    pub serial_steps: usize,
    pub total_messages: usize,
}

impl StepCounter {
    fn record<T>(&mut self, message: &Message<T>) {
        self.serial_steps = self.serial_steps.max(message.step_tag);
        self.total_messages += 1;
    }

    /// Combines collectives that ran at the same time on disjoint members.
    pub fn concurrent(self, other: Self) -> Self {
        Self {
            serial_steps: self.serial_steps.max(other.serial_steps),
            total_messages: self.total_messages + other.total_messages,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Ring,
    Tree,
    Ps,
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Topology::Ring => "ring",
            Topology::Tree => "tree",
            Topology::Ps => "ps",
        })
    }
}

/// How roles are driven.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    #[default]
    Lockstep,
    Threaded,
}

/// One participant's side of a round-based protocol.
pub(crate) type Roles<T> = Vec<Box<dyn Role<T>>>;

pub(crate) trait Role<T>: Send {
    fn id(&self) -> NodeId;
    /// Messages this node sends in `round`; tags must equal `round`.
    fn send(&mut self, round: usize) -> Result<Vec<Message<T>>>;
    /// Senders this node receives from in `round`, in order.
    fn expects(&self, round: usize) -> Vec<NodeId>;
    fn receive(&mut self, round: usize, message: Message<T>) -> Result<()>;
    /// Final averaged vector for worker roles.
    fn output(&self) -> Option<Vec<T>>;
}

const RECV_TIMEOUT: Duration = Duration::from_secs(60);

fn accept<T>(role: &mut dyn Role<T>, round: usize, message: Message<T>) -> Result<()> {
    if message.step_tag != round {
        return Err(Error::Collective(format!(
            "{:?} got step {} during round {round}",
            role.id(),
            message.step_tag
        )));
    }
    role.receive(round, message)
}

fn run_lockstep<T>(roles: &mut [Box<dyn Role<T>>], rounds: usize) -> Result<StepCounter> {
    let net = Network::new(roles.iter().map(|r| r.id()));
    let mut counter = StepCounter::default();
    for round in 1..=rounds {
        for role in roles.iter_mut() {
            for message in role.send(round)? {
                counter.record(&message);
                net.send(message)?;
            }
        }
        for role in roles.iter_mut() {
            for sender in role.expects(round) {
                let message = net.recv_now(role.id(), sender)?;
                accept(role.as_mut(), round, message)?;
            }
        }
    }
    ensure_drained(&net)?;
    Ok(counter)
}

fn run_threaded<T: Send>(roles: &mut [Box<dyn Role<T>>], rounds: usize) -> Result<StepCounter> {
    let net = Network::new(roles.iter().map(|r| r.id()));
    let counters: Vec<Result<StepCounter>> = std::thread::scope(|scope| {
        let handles: Vec<_> = roles
            .iter_mut()
            .map(|role| {
                let net = &net;
                scope.spawn(move || -> Result<StepCounter> {
                    let mut counter = StepCounter::default();
                    for round in 1..=rounds {
                        for message in role.send(round)? {
                            counter.record(&message);
                            net.send(message)?;
                        }
                        for sender in role.expects(round) {
                            let message = net.recv_blocking(role.id(), sender, RECV_TIMEOUT)?;
                            accept(role.as_mut(), round, message)?;
                        }
                    }
                    Ok(counter)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Collective("node thread panicked".into())))
            })
            .collect()
    });
    let mut total = StepCounter::default();
    for counter in counters {
        let c = counter?;
        total.serial_steps = total.serial_steps.max(c.serial_steps);
        total.total_messages += c.total_messages;
    }
    ensure_drained(&net)?;
    Ok(total)
}

fn ensure_drained<T>(net: &Network<T>) -> Result<()> {
    match net.pending() {
        0 => Ok(()),
        n => Err(Error::Collective(format!("{n} messages were never received"))),
    }
}

fn check_inputs<T: Scalar>(members: &[usize], vectors: &[ParamVector<T>]) -> Result<usize> {
    if members.is_empty() {
        return Err(Error::Empty("collective with no members"));
    }
    if members.len() != vectors.len() {
        return Err(Error::LengthMismatch {
            expected: members.len(),
            found: vectors.len(),
        });
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Collective("duplicate member rank".into()));
    }
    let len = vectors[0].len();
    if len == 0 {
        return Err(Error::Empty("collective over zero-length vectors"));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            found: v.len(),
        });
    }
    Ok(len)
}

fn execute<T: Scalar>(
    mut roles: Roles<T>,
    rounds: usize,
    members: usize,
    mode: ExecMode,
) -> Result<(Vec<ParamVector<T>>, StepCounter)> {
    let counter = match mode {
        ExecMode::Lockstep => run_lockstep(&mut roles, rounds)?,
        ExecMode::Threaded => run_threaded(&mut roles, rounds)?,
    };
    let outputs = roles
        .iter()
        .take(members)
        .map(|role| {
            role.output()
                .ok_or_else(|| Error::Collective(format!("{:?} finished without a result", role.id())))
                .and_then(ParamVector::new)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, counter))
}

/// A configured all-reduce: topology, server count (PS only) and execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collective {
    pub topology: Topology,
    pub servers: usize,
    pub mode: ExecMode,
}

impl Collective {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            servers: 1,
            mode: ExecMode::Lockstep,
        }
    }

    pub fn with_servers(mut self, servers: usize) -> Self {
        self.servers = servers;
        self
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    /// Averages `vectors[i]` (owned by `members[i]`) and returns one copy per member.
    pub fn allreduce_avg<T: Scalar>(
        &self,
        members: &[usize],
        vectors: &[ParamVector<T>],
    ) -> Result<(Vec<ParamVector<T>>, StepCounter)> {
        let len = check_inputs(members, vectors)?;
        let (roles, rounds) = match self.topology {
            Topology::Ring => ring::roles(members, vectors),
            Topology::Tree => tree::roles(members, vectors)?,
            Topology::Ps => ps::roles(members, vectors, self.servers, len)?,
        };
        execute(roles, rounds, members.len(), self.mode)
    }
}

/// Ring all-reduce average (lockstep). Serial steps: `2n - 1` for `n >= 2` members.
pub fn ring_allreduce_avg<T: Scalar>(
    members: &[usize],
    vectors: &[ParamVector<T>],
) -> Result<(Vec<ParamVector<T>>, StepCounter)> {
    Collective::new(Topology::Ring).allreduce_avg(members, vectors)
}

/// Binary-tree all-reduce average (lockstep). Member count must be a power of two.
pub fn tree_allreduce_avg<T: Scalar>(
    members: &[usize],
    vectors: &[ParamVector<T>],
) -> Result<(Vec<ParamVector<T>>, StepCounter)> {
    Collective::new(Topology::Tree).allreduce_avg(members, vectors)
}

/// Parameter-server average with `servers` servers each owning a slice (lockstep).
pub fn ps_allreduce_avg<T: Scalar>(
    members: &[usize],
    vectors: &[ParamVector<T>],
    servers: usize,
) -> Result<(Vec<ParamVector<T>>, StepCounter)> {
    Collective::new(Topology::Ps)
        .with_servers(servers)
        .allreduce_avg(members, vectors)
}
