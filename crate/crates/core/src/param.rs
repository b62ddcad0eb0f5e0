//! Flat parameter vectors, the ordered averaging primitive and seeded random streams.
//!
//! Every collective in the simulator reduces through the same ordered mean: the
//! contributions are folded left to right in ascending rank order. Keeping a single
//! reduction order is what makes ring, tree and parameter-server all-reduce produce
//! bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Random stream type used everywhere in the simulator (ChaCha with 8 rounds).
pub type Rng = ChaCha8Rng;

/// A fixed-length vector of model coordinates. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector<T> {
    values: Vec<T>,
}

fn check_finite<T: Scalar>(values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, found })
    }
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        check_len(self.len(), other.len())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len(self.len(), other.len())?;
        Self::new(self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect())
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| v * factor).collect())
    }

    /// Concatenates `self` and `tail` into one vector.
    pub fn concat(&self, tail: &Self) -> Self {
        let mut values = Vec::with_capacity(self.len() + tail.len());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&tail.values);
        Self { values }
    }

    /// Splits into `[0, mid)` and `[mid, len)`.
    pub fn split_at(&self, mid: usize) -> (Self, Self) {
        let (head, tail) = self.values.split_at(mid);
        (Self { values: head.to_vec() }, Self { values: tail.to_vec() })
    }

    /// Equality of the underlying bit patterns, distinguishing `0.0` from `-0.0`.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        check_len(self.len(), other.len())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }
}

/// `a * x + y`, coordinatewise.
pub fn axpy<T: Scalar>(a: T, x: &ParamVector<T>, y: &ParamVector<T>) -> Result<ParamVector<T>> {
    if !a.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    check_len(x.len(), y.len())?;
    ParamVector::new(x.values.iter().zip(&y.values).map(|(&xi, &yi)| a * xi + yi).collect())
}

/// Coordinatewise arithmetic mean, reduced left to right in list order.
pub fn mean_of<'a, T: Scalar>(vectors: impl IntoIterator<Item = &'a ParamVector<T>>) -> Result<ParamVector<T>> {
    let parts: Vec<&[T]> = vectors.into_iter().map(|v| v.as_slice()).collect();
    ParamVector::new(ordered_mean(&parts)?)
}

/// Squared Euclidean distance.
pub fn sq_dist<T: Scalar>(x: &ParamVector<T>, y: &ParamVector<T>) -> Result<T> {
    check_len(x.len(), y.len())?;
    Ok(x.values.iter().zip(&y.values).fold(T::zero(), |acc, (&a, &b)| {
        let d = a - b;
        acc + d * d
    }))
}

/// Mean of `parts` reduced in the given order (ascending rank by convention).
/// This is the single reduction order shared by every collective.
pub(crate) fn ordered_mean<T: Scalar>(parts: &[&[T]]) -> Result<Vec<T>> {
    let (first, rest) = parts.split_first().ok_or(Error::Empty("mean of zero vectors"))?;
    let mut acc = MeanAccumulator::start(first);
    for part in rest {
        acc.add(part)?;
    }
    acc.finish()
}

/// Running state of an ordered mean.
///
/// The first contribution is kept as a reference point and later contributions
/// are accumulated as deviations from it, left to right. The result is
/// `reference + (sum of deviations) / count`, which returns a repeated value
/// exactly (a plain running sum does not). The state can be flattened into a
/// message payload so a partial reduction can travel between nodes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MeanAccumulator<T> {
    reference: Vec<T>,
    deviations: Vec<T>,
    count: usize,
}

impl<T: Scalar> MeanAccumulator<T> {
    pub(crate) fn start(first: &[T]) -> Self {
        Self {
            reference: first.to_vec(),
            deviations: vec![T::zero(); first.len()],
            count: 1,
        }
    }

    pub(crate) fn add(&mut self, next: &[T]) -> Result<()> {
        check_len(self.reference.len(), next.len())?;
        for ((dev, &r), &x) in self.deviations.iter_mut().zip(&self.reference).zip(next) {
            *dev = *dev + (x - r);
        }
        self.count += 1;
        Ok(())
    }

    pub(crate) fn count(&self) -> usize {
        self.count
    }

    pub(crate) fn finish(&self) -> Result<Vec<T>> {
        let n = T::of_count(self.count);
        let mean: Vec<T> = self
            .reference
            .iter()
            .zip(&self.deviations)
            .map(|(&r, &d)| r + d / n)
            .collect();
        check_finite(&mean)?;
        Ok(mean)
    }

    /// Flattens to `[reference, deviations]`; the count travels separately.
    pub(crate) fn to_payload(&self) -> Vec<T> {
        let mut out = self.reference.clone();
        out.extend_from_slice(&self.deviations);
        out
    }

    pub(crate) fn from_payload(payload: &[T], count: usize) -> Result<Self> {
        if !payload.len().is_multiple_of(2) || count == 0 {
            return Err(Error::DataFormat("malformed partial-mean payload".into()));
        }
        let (reference, deviations) = payload.split_at(payload.len() / 2);
        Ok(Self {
            reference: reference.to_vec(),
            deviations: deviations.to_vec(),
            count,
        })
    }
}

/// Purpose of a derived random stream; keeps streams for different uses disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shards = 2,
    Dataset = 3,
    Batch = 4,
    Problem = 5,
    Calibration = 6,
}

/// A 64-bit experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    /// Derives the stream for `(purpose, rank, iteration)`. The 256-bit ChaCha key
    /// is the little-endian concatenation of the seed, purpose, rank and iteration,
    /// so every stream is independent of the order in which streams are created.
    pub fn stream(self, purpose: Stream, rank: u64, iteration: u64) -> Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.0.to_le_bytes());
        key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
        key[16..24].copy_from_slice(&rank.to_le_bytes());
        key[24..32].copy_from_slice(&iteration.to_le_bytes());
        Rng::from_seed(key)
    }

    pub fn worker_stream(self, rank: usize, iteration: usize) -> Rng {
        self.stream(Stream::Batch, rank as u64, iteration as u64)
    }
}

/// One standard-normal draw scaled by `std`.
pub fn gaussian<T: Scalar>(rng: &mut Rng, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z * std)
}
