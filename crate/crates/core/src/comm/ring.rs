//! Ring all-reduce.
//!
//! The partial mean starts at the first member and travels once around the ring
//! (`n` hops, ending back at the first member with every contribution folded in
//! ascending order), then the mean is forwarded along the ring to the remaining
//! `n - 1` members.

use super::{Message, NodeId, Role, Roles};
use crate::error::{Error, Result};
use crate::param::{MeanAccumulator, ParamVector};
use crate::scalar::Scalar;

struct RingRole<T> {
    position: usize,
    ring: Vec<NodeId>,
    input: Vec<T>,
    partial: Option<MeanAccumulator<T>>,
    result: Option<Vec<T>>,
}

impl<T: Scalar> RingRole<T> {
    fn size(&self) -> usize {
        self.ring.len()
    }

    fn next(&self) -> NodeId {
        self.ring[(self.position + 1) % self.size()]
    }

    fn prev(&self) -> NodeId {
        self.ring[(self.position + self.size() - 1) % self.size()]
    }
}

impl<T: Scalar> Role<T> for RingRole<T> {
    fn id(&self) -> NodeId {
        self.ring[self.position]
    }

    fn send(&mut self, round: usize) -> Result<Vec<Message<T>>> {
        let n = self.size();
        let (me, next) = (self.id(), self.next());
        if round <= n {
            if self.position != round - 1 {
                return Ok(Vec::new());
            }
            if round == 1 {
                self.partial = Some(MeanAccumulator::start(&self.input));
            }
            let partial = self
                .partial
                .take()
                .ok_or_else(|| Error::Collective(format!("{me:?} has no partial mean to forward")))?;
            let message = Message::new(me, next, 0, partial.count(), partial.to_payload(), round)?;
            Ok(vec![message])
        } else if self.position == round - n - 1 {
            let mean = self
                .result
                .clone()
                .ok_or_else(|| Error::Collective(format!("{me:?} has no mean to forward")))?;
            Ok(vec![Message::new(me, next, 0, n, mean, round)?])
        } else {
            Ok(Vec::new())
        }
    }

    fn expects(&self, round: usize) -> Vec<NodeId> {
        let n = self.size();
        let receives = if round <= n {
            round % n == self.position
        } else {
            round - n == self.position
        };
        if receives {
            vec![self.prev()]
        } else {
            Vec::new()
        }
    }

    fn receive(&mut self, round: usize, message: Message<T>) -> Result<()> {
        let n = self.size();
        if round < n {
            let mut partial = MeanAccumulator::from_payload(&message.payload, message.contributions)?;
            partial.add(&self.input)?;
            self.partial = Some(partial);
        } else if round == n {
            let partial = MeanAccumulator::from_payload(&message.payload, message.contributions)?;
            if partial.count() != n {
                return Err(Error::Collective(format!(
                    "ring reduction returned {} of {n} contributions",
                    partial.count()
                )));
            }
            self.result = Some(partial.finish()?);
        } else {
            self.result = Some(message.payload);
        }
        Ok(())
    }

    fn output(&self) -> Option<Vec<T>> {
        if self.size() == 1 {
            return Some(self.input.clone());
        }
        self.result.clone()
    }
}

pub(super) fn roles<T: Scalar>(members: &[usize], vectors: &[ParamVector<T>]) -> (Roles<T>, usize) {
    let ring: Vec<NodeId> = members.iter().map(|&r| NodeId::Worker(r)).collect();
    let n = ring.len();
    let rounds = if n <= 1 { 0 } else { 2 * n - 1 };
    let roles = vectors
        .iter()
        .enumerate()
        .map(|(position, v)| {
            Box::new(RingRole {
                position,
                ring: ring.clone(),
                input: v.as_slice().to_vec(),
                partial: None,
                result: None,
            }) as Box<dyn Role<T>>
        })
        .collect();
    (roles, rounds)
}
