use super::data::Dataset;
use crate::error::{Error, Result};
use crate::param::{gaussian, ParamVector, Seed, Stream};
use crate::scalar::Scalar;

pub const MAX_HIDDEN: usize = 32;
pub const STATS_MOMENTUM: f64 = 0.9;

/// One tanh hidden layer and a logistic output, trained with binary
/// cross-entropy.
///
/// Flattened parameter layout: `W1` (hidden x d, row-major), `b1` (hidden),
/// `w2` (hidden), `b2` (1). Running statistics hold an exponential moving mean
/// and variance of each hidden pre-activation: `[means.., variances..]`. They
/// are tracked for synchronization only and never enter the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlp<T> {
    data: Dataset<T>,
    hidden: usize,
}

impl<T: Scalar> TinyMlp<T> {
    pub fn new(data: Dataset<T>, hidden: usize) -> Result<Self> {
        if hidden == 0 || hidden > MAX_HIDDEN {
            return Err(Error::InvalidConfig(format!(
                "problem.hidden must be in 1..={MAX_HIDDEN}, got {hidden}"
            )));
        }
        if data.is_empty() {
            return Err(Error::Empty("mlp dataset"));
        }
        Ok(Self { data, hidden })
    }

    pub fn data(&self) -> &Dataset<T> {
        &self.data
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_len(&self) -> usize {
        self.hidden * (self.data.dim() + 2) + 1
    }

    pub fn stats_len(&self) -> usize {
        2 * self.hidden
    }

    /// Scaled Gaussian weights and zero biases, identical for every worker.
    pub fn initial_params(&self, seed: Seed) -> Result<ParamVector<T>> {
        let (h, d) = (self.hidden, self.data.dim());
        let mut rng = seed.stream(Stream::Init, 0, 0);
        let mut values = Vec::with_capacity(self.param_len());
        values.extend((0..h * d).map(|_| gaussian::<T>(&mut rng, 1.0 / (d as f64).sqrt())));
        values.extend((0..h).map(|_| T::zero()));
        values.extend((0..h).map(|_| gaussian::<T>(&mut rng, 1.0 / (h as f64).sqrt())));
        values.push(T::zero());
        ParamVector::new(values)
    }

    pub fn initial_stats(&self) -> ParamVector<T> {
        let mut values = vec![T::zero(); self.hidden];
        values.extend(vec![T::one(); self.hidden]);
        ParamVector::new(values).expect("finite constants")
    }

    /// Mean loss, gradient, and the running statistics after folding in this
    /// batch's pre-activation moments.
    pub fn batch_loss_and_gradient(
        &self,
        params: &ParamVector<T>,
        stats: &ParamVector<T>,
        indices: &[usize],
    ) -> Result<(T, ParamVector<T>, ParamVector<T>)> {
        let (h, d) = (self.hidden, self.data.dim());
        if params.len() != self.param_len() {
            return Err(Error::LengthMismatch {
                expected: self.param_len(),
                found: params.len(),
            });
        }
        if stats.len() != self.stats_len() {
            return Err(Error::LengthMismatch {
                expected: self.stats_len(),
                found: stats.len(),
            });
        }
        if indices.is_empty() {
            return Err(Error::Empty("mlp batch"));
        }
        let p = params.as_slice();
        let (w1, rest) = p.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let b2 = b2[0];

        let mut grad = vec![T::zero(); p.len()];
        let mut loss = T::zero();
        let mut pre_sum = vec![T::zero(); h];
        let mut pre_sq = vec![T::zero(); h];
        let mut pre = vec![T::zero(); h];
        let mut act = vec![T::zero(); h];
        for &i in indices {
            let (x, y) = self.data.example(i)?;
            for j in 0..h {
                let row = &w1[j * d..(j + 1) * d];
                pre[j] = row.iter().zip(x).fold(b1[j], |acc, (&a, &b)| acc + a * b);
                act[j] = pre[j].tanh();
                pre_sum[j] = pre_sum[j] + pre[j];
                pre_sq[j] = pre_sq[j] + pre[j] * pre[j];
            }
            let z = act.iter().zip(w2).fold(b2, |acc, (&a, &b)| acc + a * b);
            loss = loss + z.max(T::zero()) + (-z.abs()).exp().ln_1p() - y * z;
            let r = if z >= T::zero() {
                T::one() / (T::one() + (-z).exp())
            } else {
                z.exp() / (T::one() + z.exp())
            } - y;
            for j in 0..h {
                grad[h * d + h + j] = grad[h * d + h + j] + r * act[j];
                let back = r * w2[j] * (T::one() - act[j] * act[j]);
                for k in 0..d {
                    grad[j * d + k] = grad[j * d + k] + back * x[k];
                }
                grad[h * d + j] = grad[h * d + j] + back;
            }
            let last = grad.len() - 1;
            grad[last] = grad[last] + r;
        }
        let n = T::of_count(indices.len());
        let grad = grad.into_iter().map(|g| g / n).collect();

        let m = T::of(STATS_MOMENTUM);
        let s = stats.as_slice();
        let mut next = Vec::with_capacity(2 * h);
        for j in 0..h {
            next.push(m * s[j] + (T::one() - m) * pre_sum[j] / n);
        }
        for j in 0..h {
            let mean = pre_sum[j] / n;
            let var = (pre_sq[j] / n - mean * mean).max(T::zero());
            next.push(m * s[h + j] + (T::one() - m) * var);
        }
        Ok((loss / n, ParamVector::new(grad)?, ParamVector::new(next)?))
    }

    pub fn loss_and_gradient(&self, params: &ParamVector<T>) -> Result<(T, ParamVector<T>)> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        let (loss, grad, _) = self.batch_loss_and_gradient(params, &self.initial_stats(), &all)?;
        Ok((loss, grad))
    }
}
