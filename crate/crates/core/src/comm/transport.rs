use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

/// Address of a participant in a collective: a worker rank or a logical parameter server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Worker(usize),
    Server(usize),
}

/// One transfer. `step_tag` is the serial communication step it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Message<T> {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub segment: usize,
    /// Number of worker contributions folded into (or packed in) the payload.
    pub contributions: usize,
    pub payload: Vec<T>,
    pub step_tag: usize,
}

impl<T> Message<T> {
    pub fn new(
        sender: NodeId,
        receiver: NodeId,
        segment: usize,
        contributions: usize,
        payload: Vec<T>,
        step_tag: usize,
    ) -> Result<Self> {
        if payload.is_empty() {
            return Err(Error::Collective(format!(
                "empty payload from {sender:?} to {receiver:?}"
            )));
        }
        Ok(Self {
            sender,
            receiver,
            segment,
            contributions,
            payload,
            step_tag,
        })
    }
}

/// A node's inbox. Messages from one sender are taken in the order they were posted.
#[derive(Debug)]
pub struct Endpoint<T> {
    id: NodeId,
    inbox: Mutex<VecDeque<Message<T>>>,
    arrived: Condvar,
}

impl<T> Endpoint<T> {
    fn new(id: NodeId) -> Self {
        Self {
            id,
            inbox: Mutex::new(VecDeque::new()),
            arrived: Condvar::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    fn post(&self, message: Message<T>) {
        self.inbox.lock().expect("inbox lock").push_back(message);
        self.arrived.notify_all();
    }

    fn take_from(queue: &mut VecDeque<Message<T>>, sender: NodeId) -> Option<Message<T>> {
        let index = queue.iter().position(|m| m.sender == sender)?;
        queue.remove(index)
    }

    fn try_take(&self, sender: NodeId) -> Option<Message<T>> {
        Self::take_from(&mut self.inbox.lock().expect("inbox lock"), sender)
    }

    fn take_blocking(&self, sender: NodeId, timeout: Duration) -> Option<Message<T>> {
        let mut queue = self.inbox.lock().expect("inbox lock");
        loop {
            if let Some(message) = Self::take_from(&mut queue, sender) {
                return Some(message);
            }
            let (next, waited) = self.arrived.wait_timeout(queue, timeout).expect("inbox lock");
            queue = next;
            if waited.timed_out() {
                return Self::take_from(&mut queue, sender);
            }
        }
    }

    fn pending(&self) -> usize {
        self.inbox.lock().expect("inbox lock").len()
    }
}

/// Reliable in-process links between a fixed set of nodes. Safe to share between threads.
#[derive(Debug)]
pub struct Network<T> {
    endpoints: BTreeMap<NodeId, Endpoint<T>>,
}

impl<T> Network<T> {
    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            endpoints: nodes.into_iter().map(|id| (id, Endpoint::new(id))).collect(),
        }
    }

    fn endpoint(&self, id: NodeId) -> Result<&Endpoint<T>> {
        self.endpoints
            .get(&id)
            .ok_or_else(|| Error::Collective(format!("unknown node {id:?}")))
    }

    pub fn send(&self, message: Message<T>) -> Result<()> {
        self.endpoint(message.sender)?;
        self.endpoint(message.receiver)?.post(message);
        Ok(())
    }

    /// Takes the oldest message from `sender` already waiting at `receiver`.
    pub fn recv_now(&self, receiver: NodeId, sender: NodeId) -> Result<Message<T>> {
        self.endpoint(receiver)?
            .try_take(sender)
            .ok_or_else(|| Error::Collective(format!("{receiver:?} expected a message from {sender:?}")))
    }

    /// Waits up to `timeout` for a message from `sender`.
    pub fn recv_blocking(&self, receiver: NodeId, sender: NodeId, timeout: Duration) -> Result<Message<T>> {
        self.endpoint(receiver)?
            .take_blocking(sender, timeout)
            .ok_or_else(|| Error::Collective(format!("{receiver:?} timed out waiting for {sender:?}")))
    }

    /// Messages delivered but never taken.
    pub fn pending(&self) -> usize {
        self.endpoints.values().map(Endpoint::pending).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(from: usize, to: usize, value: f64, tag: usize) -> Message<f64> {
        Message::new(NodeId::Worker(from), NodeId::Worker(to), 0, 1, vec![value], tag).unwrap()
    }

    #[test]
    fn per_pair_fifo() {
        let net = Network::new([NodeId::Worker(0), NodeId::Worker(1), NodeId::Worker(2)]);
        net.send(msg(0, 2, 1.0, 1)).unwrap();
        net.send(msg(1, 2, 5.0, 1)).unwrap();
        net.send(msg(0, 2, 2.0, 2)).unwrap();
        assert_eq!(
            net.recv_now(NodeId::Worker(2), NodeId::Worker(0)).unwrap().payload,
            vec![1.0]
        );
        assert_eq!(
            net.recv_now(NodeId::Worker(2), NodeId::Worker(0)).unwrap().payload,
            vec![2.0]
        );
        assert_eq!(net.pending(), 1);
        assert_eq!(
            net.recv_now(NodeId::Worker(2), NodeId::Worker(1)).unwrap().payload,
            vec![5.0]
        );
        assert!(net.recv_now(NodeId::Worker(2), NodeId::Worker(1)).is_err());
        assert_eq!(net.pending(), 0);
    }

    #[test]
    fn rejects_unknown_nodes_and_empty_payloads() {
        let net: Network<f64> = Network::new([NodeId::Worker(0)]);
        assert!(net.send(msg(0, 1, 1.0, 1)).is_err());
        assert!(Message::<f64>::new(NodeId::Worker(0), NodeId::Worker(0), 0, 1, vec![], 1).is_err());
    }

    #[test]
    fn blocking_receive_across_threads() {
        let net = Network::new([NodeId::Worker(0), NodeId::Worker(1)]);
        std::thread::scope(|s| {
            s.spawn(|| {
                std::thread::sleep(Duration::from_millis(20));
                net.send(msg(0, 1, 7.0, 1)).unwrap();
            });
            let got = net
                .recv_blocking(NodeId::Worker(1), NodeId::Worker(0), Duration::from_secs(5))
                .unwrap();
            assert_eq!(got.payload, vec![7.0]);
        });
        assert!(net
            .recv_blocking(NodeId::Worker(1), NodeId::Worker(0), Duration::from_millis(10))
            .is_err());
    }
}
