//! Binary-tree all-reduce over `n = 2^k` members.
//!
//! Members are the leaves. The internal node covering leaves `[j * 2^l, (j+1) * 2^l)`
//! is hosted by the first worker of that block. During reduction each internal
//! node receives from its left child and then its right child (two serial steps
//! per level); during broadcast a node sends to both children in one step. That
//! gives `2k + k` serial steps.
//!
//! Reduction messages carry the ordered contributions of their subtree, so the
//! root folds all of them in ascending rank order, exactly like every other
//! collective.

use super::{Message, NodeId, Role, Roles};
use crate::error::{Error, Result};
use crate::param::{ordered_mean, ParamVector};
use crate::scalar::Scalar;

struct TreeRole<T> {
    position: usize,
    members: Vec<NodeId>,
    levels: usize,
    len: usize,
    /// Gathered contributions of the node hosted at each level.
    held: Vec<Option<(Vec<T>, usize)>>,
    mean: Option<Vec<T>>,
}

impl<T: Scalar> TreeRole<T> {
    fn hosts(&self, level: usize) -> bool {
        self.position.is_multiple_of(1 << level)
    }

    fn node(&self, position: usize) -> NodeId {
        self.members[position]
    }

    /// Reduction level and side for `round`, if it is a reduction round.
    fn reduction(&self, round: usize) -> Option<(usize, bool)> {
        (round <= 2 * self.levels).then(|| (round.div_ceil(2), round % 2 == 1))
    }

    /// Broadcast level for `round`, if it is a broadcast round.
    fn broadcast(&self, round: usize) -> Option<usize> {
        let k = self.levels;
        (round > 2 * k && round <= 3 * k).then(|| 3 * k + 1 - round)
    }
}

impl<T: Scalar> Role<T> for TreeRole<T> {
    fn id(&self) -> NodeId {
        self.node(self.position)
    }

    fn send(&mut self, round: usize) -> Result<Vec<Message<T>>> {
        let me = self.id();
        if let Some((level, left)) = self.reduction(round) {
            let child_level = level - 1;
            if !self.hosts(child_level) {
                return Ok(Vec::new());
            }
            let is_left = (self.position >> child_level).is_multiple_of(2);
            if is_left != left {
                return Ok(Vec::new());
            }
            let parent = self.position - self.position % (1 << level);
            let (payload, count) = self.held[child_level]
                .clone()
                .ok_or_else(|| Error::Collective(format!("{me:?} has nothing to reduce at level {child_level}")))?;
            return Ok(vec![Message::new(me, self.node(parent), 0, count, payload, round)?]);
        }
        if let Some(level) = self.broadcast(round) {
            if !self.hosts(level) {
                return Ok(Vec::new());
            }
            let mean = self
                .mean
                .clone()
                .ok_or_else(|| Error::Collective(format!("{me:?} has no mean to broadcast")))?;
            let n = self.members.len();
            let right = self.node(self.position + (1 << (level - 1)));
            return Ok(vec![
                Message::new(me, me, 0, n, mean.clone(), round)?,
                Message::new(me, right, 0, n, mean, round)?,
            ]);
        }
        Ok(Vec::new())
    }

    fn expects(&self, round: usize) -> Vec<NodeId> {
        if let Some((level, left)) = self.reduction(round) {
            if !self.hosts(level) {
                return Vec::new();
            }
            let child = if left {
                self.position
            } else {
                self.position + (1 << (level - 1))
            };
            return vec![self.node(child)];
        }
        if let Some(level) = self.broadcast(round) {
            if self.hosts(level - 1) {
                let parent = self.position - self.position % (1 << level);
                return vec![self.node(parent)];
            }
        }
        Vec::new()
    }

    fn receive(&mut self, round: usize, message: Message<T>) -> Result<()> {
        if let Some((level, left)) = self.reduction(round) {
            if left {
                self.held[level] = Some((message.payload, message.contributions));
            } else {
                let (mut gathered, count) = self.held[level]
                    .take()
                    .ok_or_else(|| Error::Collective("right child arrived before left child".into()))?;
                gathered.extend(message.payload);
                self.held[level] = Some((gathered, count + message.contributions));
            }
            if level == self.levels && !left {
                let (gathered, count) = self.held[level].as_ref().expect("root holds gathered values");
                if *count != self.members.len() || gathered.len() != count * self.len {
                    return Err(Error::Collective("tree reduction lost contributions".into()));
                }
                let parts: Vec<&[T]> = gathered.chunks(self.len).collect();
                self.mean = Some(ordered_mean(&parts)?);
            }
        } else {
            self.mean = Some(message.payload);
        }
        Ok(())
    }

    fn output(&self) -> Option<Vec<T>> {
        if self.levels == 0 {
            return self.held[0].as_ref().map(|(v, _)| v.clone());
        }
        self.mean.clone()
    }
}

pub(super) fn roles<T: Scalar>(members: &[usize], vectors: &[ParamVector<T>]) -> Result<(Roles<T>, usize)> {
    let n = members.len();
    if !n.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "tree all-reduce needs a power of two members, got {n}"
        )));
    }
    let levels = n.trailing_zeros() as usize;
    let nodes: Vec<NodeId> = members.iter().map(|&r| NodeId::Worker(r)).collect();
    let roles = vectors
        .iter()
        .enumerate()
        .map(|(position, v)| {
            let mut held = vec![None; levels + 1];
            held[0] = Some((v.as_slice().to_vec(), 1));
            Box::new(TreeRole {
                position,
                members: nodes.clone(),
                levels,
                len: v.len(),
                held,
                mean: None,
            }) as Box<dyn Role<T>>
        })
        .collect();
    Ok((roles, 3 * levels))
}
