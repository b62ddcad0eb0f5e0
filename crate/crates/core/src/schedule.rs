//! Divide-and-shuffle group schedule.
//!
//! With `W = N * N` workers, even iterations group consecutive ranks
//! (`rank / N`) and odd iterations group strided ranks (`rank % N`). Every
//! strided group holds exactly one member of each block group, so any worker
//! has mixed with every other worker after two iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World size and group size of a divide-and-shuffle run.
///
/// Square mode requires `world_size == group_size * group_size`. The degenerate
/// configuration `group_size == world_size` (one group holding every worker) is
/// also accepted; it never shuffles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    world_size: usize,
    group_size: usize,
}

impl WorldConfig {
    pub fn new(world_size: usize, group_size: usize) -> Result<Self> {
        if world_size == 0 || group_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "world_size and group_size must be positive (world_size={world_size}, group_size={group_size})"
            )));
        }
        if group_size.checked_mul(group_size) != Some(world_size) && group_size != world_size {
            return Err(Error::InvalidConfig(format!(
                "ds-sync requires world_size == group_size * group_size (W == N^2): \
                 world_size={world_size}, group_size={group_size}"
            )));
        }
        Ok(Self { world_size, group_size })
    }

    /// `W = n * n` with groups of `n`.
    pub fn square(group_size: usize) -> Result<Self> {
        Self::new(group_size * group_size, group_size)
    }

    /// A single group containing all `world_size` workers.
    pub fn single_group(world_size: usize) -> Result<Self> {
        Self::new(world_size, world_size)
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        self.world_size / self.group_size
    }

    pub fn is_single_group(&self) -> bool {
        self.group_size == self.world_size
    }
}

/// The disjoint groups used at one iteration; each group is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub iteration: usize,
    pub groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    /// Everyone in one group (the BSP collective).
    pub fn everyone(iteration: usize, world_size: usize) -> Self {
        Self {
            iteration,
            groups: vec![(0..world_size).collect()],
        }
    }

    pub fn group_containing(&self, rank: usize) -> Option<&[usize]> {
        self.groups.iter().find(|g| g.contains(&rank)).map(Vec::as_slice)
    }

    /// Disjoint, covering `0..world_size`, every group sorted ascending.
    pub fn is_valid_for(&self, world_size: usize) -> bool {
        let mut seen = vec![false; world_size];
        for group in &self.groups {
            if group.is_empty() || group.windows(2).any(|w| w[0] >= w[1]) {
                return false;
            }
            for &rank in group {
                if rank >= world_size || seen[rank] {
                    return false;
                }
                seen[rank] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn make_partition(cfg: &WorldConfig, t: usize) -> GroupPartition {
    let (w, n) = (cfg.world_size, cfg.group_size);
    if cfg.is_single_group() {
        return GroupPartition::everyone(t, w);
    }
    let groups = if t.is_multiple_of(2) {
        (0..n).map(|g| (g * n..(g + 1) * n).collect()).collect()
    } else {
        (0..n).map(|g| (g..w).step_by(n).collect()).collect()
    };
    GroupPartition { iteration: t, groups }
}

pub fn group_of(cfg: &WorldConfig, t: usize, rank: usize) -> Result<Vec<usize>> {
    if rank >= cfg.world_size {
        return Err(Error::RankOutOfRange {
            rank,
            world_size: cfg.world_size,
        });
    }
    let n = cfg.group_size;
    if cfg.is_single_group() {
        return Ok((0..cfg.world_size).collect());
    }
    Ok(if t.is_multiple_of(2) {
        let block = rank / n;
        (block * n..(block + 1) * n).collect()
    } else {
        (rank % n..cfg.world_size).step_by(n).collect()
    })
}

/// True iff every group at `t + 1` holds exactly one member of each group at `t`.
pub fn check_mixing(cfg: &WorldConfig, t: usize) -> bool {
    let now = make_partition(cfg, t);
    let next = make_partition(cfg, t + 1);
    next.groups.iter().all(|later| {
        now.groups
            .iter()
            .all(|earlier| later.iter().filter(|r| earlier.contains(r)).count() == 1)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> WorldConfig {
        WorldConfig::square(n).unwrap()
    }

    #[test]
    fn partitions_match_worked_examples() {
        assert_eq!(make_partition(&cfg(2), 0).groups, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(make_partition(&cfg(2), 1).groups, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(
            make_partition(&cfg(3), 0).groups,
            vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]]
        );
        assert_eq!(
            make_partition(&cfg(3), 1).groups,
            vec![vec![0, 3, 6], vec![1, 4, 7], vec![2, 5, 8]]
        );
    }

    #[test]
    fn group_of_examples() {
        assert_eq!(group_of(&cfg(2), 0, 3).unwrap(), vec![2, 3]);
        assert_eq!(group_of(&cfg(2), 1, 3).unwrap(), vec![1, 3]);
        assert_eq!(group_of(&cfg(3), 2, 4).unwrap(), vec![3, 4, 5]);
        assert_eq!(
            group_of(&cfg(2), 0, 4),
            Err(Error::RankOutOfRange { rank: 4, world_size: 4 })
        );
    }

    #[test]
    fn mixing_examples() {
        assert!(check_mixing(&cfg(2), 0));
        assert!(check_mixing(&cfg(3), 1));
        assert!(check_mixing(&cfg(4), 5));
    }

    #[test]
    fn exhaustive_properties() {
        for n in 2..=5 {
            let c = cfg(n);
            for t in 0..=10 {
                let p = make_partition(&c, t);
                assert!(p.is_valid_for(c.world_size()), "W={} t={t}", c.world_size());
                assert!(p.groups.iter().all(|g| g.len() == n));
                assert_eq!(p.groups, make_partition(&c, t + 2).groups);
                assert!(check_mixing(&c, t));
                for i in 0..c.world_size() {
                    let gi = group_of(&c, t, i).unwrap();
                    assert!(gi.contains(&i));
                    assert_eq!(Some(gi.as_slice()), p.group_containing(i));
                    for j in 0..c.world_size() {
                        let gj = group_of(&c, t, j).unwrap();
                        assert_eq!(gi.contains(&j), gj.contains(&i));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_non_square() {
        let err = WorldConfig::new(6, 2).unwrap_err();
        assert!(err.to_string().contains("W == N^2"), "{err}");
        assert!(WorldConfig::new(0, 0).is_err());
        assert!(WorldConfig::new(8, 3).is_err());
    }

    #[test]
    fn single_group_is_static() {
        let c = WorldConfig::single_group(4).unwrap();
        for t in 0..4 {
            assert_eq!(make_partition(&c, t).groups, vec![vec![0, 1, 2, 3]]);
            assert_eq!(group_of(&c, t, 2).unwrap(), vec![0, 1, 2, 3]);
        }
        assert!(!check_mixing(&c, 0));
        let one = WorldConfig::new(1, 1).unwrap();
        assert_eq!(make_partition(&one, 1).groups, vec![vec![0]]);
        assert!(check_mixing(&one, 3));
    }

    #[test]
    fn validity_detects_broken_partitions() {
        let bad = GroupPartition {
            iteration: 0,
            groups: vec![vec![0, 1], vec![1, 2]],
        };
        assert!(!bad.is_valid_for(3));
        let unsorted = GroupPartition {
            iteration: 0,
            groups: vec![vec![1, 0]],
        };
        assert!(!unsorted.is_valid_for(2));
        let missing = GroupPartition {
            iteration: 0,
            groups: vec![vec![0]],
        };
        assert!(!missing.is_valid_for(2));
    }
}
