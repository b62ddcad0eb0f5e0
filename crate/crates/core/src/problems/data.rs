use std::io::BufRead;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{gaussian, Rng, Seed, Stream};
use crate::scalar::Scalar;

/// Binary-labelled examples; features row-major, labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    dim: usize,
    features: Vec<T>,
    labels: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(dim: usize, features: Vec<T>, labels: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dataset dimension must be positive".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::LengthMismatch {
                expected: dim * labels.len(),
                found: features.len(),
            });
        }
        if let Some(index) = features.iter().chain(&labels).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::DataFormat("labels must be 0 or 1".into()));
        }
        Ok(Self { dim, features, labels })
    }

    /// Standard normal features; labels drawn from a logistic model around a
    /// hidden standard-normal weight vector.
    pub fn synthetic(dim: usize, examples: usize, seed: Seed) -> Result<Self> {
        if examples == 0 {
            return Err(Error::InvalidConfig("problem.M: must be positive".into()));
        }
        let mut rng = seed.stream(Stream::Dataset, 0, 0);
        let truth: Vec<f64> = (0..dim).map(|_| gaussian::<f64>(&mut rng, 1.0)).collect();
        let scale = 1.0 / (dim as f64).sqrt();
        let mut features = Vec::with_capacity(dim * examples);
        let mut labels = Vec::with_capacity(examples);
        for _ in 0..examples {
            let x: Vec<f64> = (0..dim).map(|_| gaussian::<f64>(&mut rng, 1.0)).collect();
            let z: f64 = 2.0 * scale * x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>();
            let u: f64 = rand::Rng::random(&mut rng);
            labels.push(if u < 1.0 / (1.0 + (-z).exp()) {
                T::one()
            } else {
                T::zero()
            });
            features.extend(x.into_iter().map(T::of));
        }
        Self::new(dim, features, labels)
    }

    /// One example per row, comma separated, label last. Labels may be `0/1` or
    /// `-1/1`. A first row that does not parse as numbers is treated as a header.
    pub fn from_csv(reader: impl BufRead) -> Result<Self> {
        let mut dim = None;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::DataFormat(e.to_string()))?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
            let row = match parsed {
                Ok(row) => row,
                Err(_) if line_no == 0 => continue,
                Err(e) => return Err(Error::DataFormat(format!("line {}: {e}", line_no + 1))),
            };
            if row.len() < 2 {
                return Err(Error::DataFormat(format!(
                    "line {}: need features and a label",
                    line_no + 1
                )));
            }
            let d = *dim.get_or_insert(row.len() - 1);
            if row.len() - 1 != d {
                return Err(Error::DataFormat(format!(
                    "line {}: expected {} features, found {}",
                    line_no + 1,
                    d,
                    row.len() - 1
                )));
            }
            let y = row[d];
            let label = if y == 1.0 {
                1.0
            } else if y == 0.0 || y == -1.0 {
                0.0
            } else {
                return Err(Error::DataFormat(format!(
                    "line {}: label {y} not in {{0, 1, -1}}",
                    line_no + 1
                )));
            };
            features.extend(row[..d].iter().map(|&v| T::of(v)));
            labels.push(T::of(label));
        }
        let dim = dim.ok_or(Error::Empty("csv contains no examples"))?;
        Self::new(dim, features, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, index: usize) -> Result<(&[T], T)> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange { index, len: self.len() });
        }
        Ok((
            &self.features[index * self.dim..(index + 1) * self.dim],
            self.labels[index],
        ))
    }

    pub(crate) fn features(&self) -> &[T] {
        &self.features
    }
}

/// The examples owned by one worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    /// `batch_size` indices drawn uniformly with replacement.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.indices.is_empty() {
            return Err(Error::Empty("worker shard has no examples"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok((0..batch_size)
            .map(|_| self.indices[rand::Rng::random_range(&mut *rng, 0..self.indices.len())])
            .collect())
    }
}

impl Shard {
    /// Epoch-shuffled batch: positions `t*b .. (t+1)*b` of the sequence formed by
    /// concatenating one fresh seeded permutation of the shard per epoch.
    /// Stateless, so any iteration can be replayed in isolation.
    pub fn epoch_batch(&self, batch_size: usize, seed: Seed, t: usize) -> Result<Vec<usize>> {
        if self.indices.is_empty() {
            return Err(Error::Empty("worker shard has no examples"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        let len = self.indices.len();
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (t * batch_size..(t + 1) * batch_size)
            .map(|pos| {
                let epoch = pos / len;
                if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut order = self.indices.clone();
                    order.shuffle(&mut seed.stream(Stream::Batch, self.owner as u64, epoch as u64 | 1 << 63));
                    cached = Some((epoch, order));
                }
                Ok(cached.as_ref().expect("filled above").1[pos % len])
            })
            .collect()
    }
}

/// Seeded random permutation of `0..examples` dealt round-robin to `world_size` shards.
pub fn make_shards(examples: usize, world_size: usize, seed: Seed) -> Result<Vec<Shard>> {
    if world_size == 0 {
        return Err(Error::InvalidConfig("world_size must be positive".into()));
    }
    if examples < world_size {
        return Err(Error::InvalidConfig(format!(
            "dataset has {examples} examples, fewer than world_size={world_size}"
        )));
    }
    let mut order: Vec<usize> = (0..examples).collect();
    order.shuffle(&mut seed.stream(Stream::Shards, 0, 0));
    let mut shards: Vec<Shard> = (0..world_size)
        .map(|owner| Shard {
            owner,
            indices: Vec::new(),
        })
        .collect();
    for (i, index) in order.into_iter().enumerate() {
        shards[i % world_size].indices.push(index);
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covers(shards: &[Shard], m: usize) -> bool {
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        all == (0..m).collect::<Vec<_>>()
    }

    #[test]
    fn shard_examples() {
        let s = make_shards(4, 4, Seed(1)).unwrap();
        assert!(s.iter().all(|sh| sh.indices.len() == 1));
        assert!(covers(&s, 4));

        let s = make_shards(10, 4, Seed(1)).unwrap();
        let mut sizes: Vec<usize> = s.iter().map(|sh| sh.indices.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3, 3]);
        assert!(covers(&s, 10));

        assert_eq!(
            make_shards(10, 4, Seed(9)).unwrap(),
            make_shards(10, 4, Seed(9)).unwrap()
        );
        assert_ne!(
            make_shards(10, 4, Seed(9)).unwrap(),
            make_shards(10, 4, Seed(10)).unwrap()
        );
        assert!(make_shards(3, 4, Seed(1)).is_err());
    }

    #[test]
    fn shard_partition_property() {
        for m in 1..40 {
            for w in 1..=m.min(9) {
                let s = make_shards(m, w, Seed(m as u64 * 31 + w as u64)).unwrap();
                assert!(covers(&s, m));
                let sizes: Vec<usize> = s.iter().map(|sh| sh.indices.len()).collect();
                assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                assert!(s.iter().enumerate().all(|(i, sh)| sh.owner == i));
            }
        }
    }

    #[test]
    fn csv_layout() {
        let text = "x1,x2,label\n1.0,2.0,1\n-1.5,0.5,0\n3,4,-1\n";
        let d = Dataset::<f64>::from_csv(text.as_bytes()).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.len(), 3);
        assert_eq!(d.example(2).unwrap(), (&[3.0, 4.0][..], 0.0));
        assert!(d.example(3).is_err());
        assert!(Dataset::<f64>::from_csv("1,2,1\n1,1\n".as_bytes()).is_err());
        assert!(Dataset::<f64>::from_csv("1,2,3\n".as_bytes()).is_err());
        assert!(Dataset::<f64>::from_csv("".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_balanced_enough() {
        let a = Dataset::<f64>::synthetic(5, 500, Seed(2)).unwrap();
        assert_eq!(a, Dataset::<f64>::synthetic(5, 500, Seed(2)).unwrap());
        let positives = (0..a.len()).filter(|&i| a.example(i).unwrap().1 == 1.0).count();
        assert!(positives > 100 && positives < 400, "{positives}");
    }

    #[test]
    fn sampling_stays_in_shard() {
        let shard = Shard {
            owner: 0,
            indices: vec![3, 7, 11],
        };
        let mut rng = Seed(5).worker_stream(0, 0);
        let batch = shard.sample(50, &mut rng).unwrap();
        assert!(batch.iter().all(|i| shard.indices.contains(i)));
        assert!(Shard {
            owner: 0,
            indices: vec![]
        }
        .sample(1, &mut rng)
        .is_err());
    }

    #[test]
    fn epoch_batches_visit_each_example_once_per_epoch() {
        let shard = Shard {
            owner: 2,
            indices: (10..22).collect(),
        };
        let mut seen: Vec<usize> = (0..4).flat_map(|t| shard.epoch_batch(3, Seed(8), t).unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (10..22).collect::<Vec<_>>());
        let second: Vec<usize> = (4..8).flat_map(|t| shard.epoch_batch(3, Seed(8), t).unwrap()).collect();
        let first: Vec<usize> = (0..4).flat_map(|t| shard.epoch_batch(3, Seed(8), t).unwrap()).collect();
        assert_ne!(first, second);
        assert_eq!(
            shard.epoch_batch(5, Seed(8), 3).unwrap(),
            shard.epoch_batch(5, Seed(8), 3).unwrap()
        );
    }
}
