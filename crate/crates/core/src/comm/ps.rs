//! Parameter-server averaging.
//!
//! The vector is split into contiguous slices, one per server. Each server takes
//! one push per step from the members in ascending order (`n` steps), then
//! returns the averaged slice to one member per step (`n` more steps). Servers
//! work in parallel, so the count of servers changes bandwidth, not steps.

use super::{Message, NodeId, Role, Roles};
use crate::error::{Error, Result};
use crate::param::{MeanAccumulator, ParamVector};
use crate::scalar::Scalar;

fn slice_bounds(len: usize, servers: usize) -> Vec<(usize, usize)> {
    let base = len / servers;
    let extra = len % servers;
    let mut start = 0;
    (0..servers)
        .map(|s| {
            let size = base + usize::from(s < extra);
            let bounds = (start, start + size);
            start += size;
            bounds
        })
        .collect()
}

struct PsWorker<T> {
    position: usize,
    rank: usize,
    servers: usize,
    members: usize,
    bounds: Vec<(usize, usize)>,
    input: Vec<T>,
    slices: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Role<T> for PsWorker<T> {
    fn id(&self) -> NodeId {
        NodeId::Worker(self.rank)
    }

    fn send(&mut self, round: usize) -> Result<Vec<Message<T>>> {
        if round != self.position + 1 {
            return Ok(Vec::new());
        }
        self.bounds
            .iter()
            .enumerate()
            .map(|(s, &(lo, hi))| Message::new(self.id(), NodeId::Server(s), s, 1, self.input[lo..hi].to_vec(), round))
            .collect()
    }

    fn expects(&self, round: usize) -> Vec<NodeId> {
        if round == self.members + self.position + 1 {
            (0..self.servers).map(NodeId::Server).collect()
        } else {
            Vec::new()
        }
    }

    fn receive(&mut self, _round: usize, message: Message<T>) -> Result<()> {
        let slot = self
            .slices
            .get_mut(message.segment)
            .ok_or_else(|| Error::Collective(format!("unknown slice {}", message.segment)))?;
        *slot = Some(message.payload);
        Ok(())
    }

    fn output(&self) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(self.input.len());
        for slice in &self.slices {
            out.extend_from_slice(slice.as_ref()?);
        }
        Some(out)
    }
}

struct PsServer<T> {
    index: usize,
    workers: Vec<NodeId>,
    partial: Option<MeanAccumulator<T>>,
    mean: Option<Vec<T>>,
}

impl<T: Scalar> Role<T> for PsServer<T> {
    fn id(&self) -> NodeId {
        NodeId::Server(self.index)
    }

    fn send(&mut self, round: usize) -> Result<Vec<Message<T>>> {
        let n = self.workers.len();
        if round <= n {
            return Ok(Vec::new());
        }
        let mean = self
            .mean
            .clone()
            .ok_or_else(|| Error::Collective(format!("server {} has no mean", self.index)))?;
        let target = self.workers[round - n - 1];
        Ok(vec![Message::new(self.id(), target, self.index, n, mean, round)?])
    }

    fn expects(&self, round: usize) -> Vec<NodeId> {
        if round <= self.workers.len() {
            vec![self.workers[round - 1]]
        } else {
            Vec::new()
        }
    }

    fn receive(&mut self, round: usize, message: Message<T>) -> Result<()> {
        match self.partial.as_mut() {
            None => self.partial = Some(MeanAccumulator::start(&message.payload)),
            Some(partial) => partial.add(&message.payload)?,
        }
        if round == self.workers.len() {
            self.mean = Some(self.partial.as_ref().expect("partial started").finish()?);
        }
        Ok(())
    }

    fn output(&self) -> Option<Vec<T>> {
        None
    }
}

pub(super) fn roles<T: Scalar>(
    members: &[usize],
    vectors: &[ParamVector<T>],
    servers: usize,
    len: usize,
) -> Result<(Roles<T>, usize)> {
    if servers == 0 {
        return Err(Error::InvalidConfig("parameter server count must be at least 1".into()));
    }
    // Never hand a server an empty slice.
    let servers = servers.min(len);
    let bounds = slice_bounds(len, servers);
    let n = members.len();
    let mut roles: Roles<T> = vectors
        .iter()
        .enumerate()
        .map(|(position, v)| {
            Box::new(PsWorker {
                position,
                rank: members[position],
                servers,
                members: n,
                bounds: bounds.clone(),
                input: v.as_slice().to_vec(),
                slices: vec![None; servers],
            }) as Box<dyn Role<T>>
        })
        .collect();
    let workers: Vec<NodeId> = members.iter().map(|&r| NodeId::Worker(r)).collect();
    roles.extend((0..servers).map(|index| {
        Box::new(PsServer {
            index,
            workers: workers.clone(),
            partial: None,
            mean: None,
        }) as Box<dyn Role<T>>
    }));
    Ok((roles, 2 * n))
}

#[cfg(test)]
mod tests {
    use super::slice_bounds;

    #[test]
    fn slices_cover_vector() {
        assert_eq!(slice_bounds(10, 3), vec![(0, 4), (4, 7), (7, 10)]);
        assert_eq!(slice_bounds(2, 2), vec![(0, 1), (1, 2)]);
    }
}
