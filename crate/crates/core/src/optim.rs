//! Worker-local optimizers. Optimizer state never leaves the worker that owns it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    VanillaSgd,
    SgdMomentum,
    Adam,
    Adamw,
}

/// Hyperparameters shared by all optimizer kinds; each kind reads the ones it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::VanillaSgd,
            momentum: 0.9,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn vanilla() -> Self {
        Self::default()
    }

    pub fn momentum(momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..Self::default()
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::default()
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "optimizer.{name} must be in [0, 1), got {v}"
                )))
            }
        };
        unit("momentum", self.momentum)?;
        unit("betas[0]", self.betas.0)?;
        unit("betas[1]", self.betas.1)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "optimizer.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "optimizer.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-worker optimizer state. Moment buffers are created on the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    learning_rate: T,
    first_moment: Option<ParamVector<T>>,
    second_moment: Option<ParamVector<T>>,
    step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, learning_rate: T) -> Result<Self> {
        config.validate()?;
        let mut state = Self {
            config,
            learning_rate: T::zero(),
            first_moment: None,
            second_moment: None,
            step_count: 0,
        };
        state.set_learning_rate(learning_rate)?;
        Ok(state)
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn learning_rate(&self) -> T {
        self.learning_rate
    }

    /// Sets the rate used by the next step. Zero is allowed and freezes the weights.
    pub fn set_learning_rate(&mut self, rate: T) -> Result<()> {
        if !(rate >= T::zero() && rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {rate}")));
        }
        self.learning_rate = rate;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> Option<&ParamVector<T>> {
        self.first_moment.as_ref()
    }

    pub fn second_moment(&self) -> Option<&ParamVector<T>> {
        self.second_moment.as_ref()
    }

    /// Returns `params - lr * update` and the advanced state; `self` is untouched.
    pub fn apply_step(&self, params: &ParamVector<T>, grad: &ParamVector<T>) -> Result<(ParamVector<T>, Self)> {
        if params.len() != grad.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                found: grad.len(),
            });
        }
        for moment in [&self.first_moment, &self.second_moment].into_iter().flatten() {
            if moment.len() != params.len() {
                return Err(Error::LengthMismatch {
                    expected: moment.len(),
                    found: params.len(),
                });
            }
        }

        let lr = self.learning_rate;
        let decay = T::of(self.config.weight_decay);
        let w = params.as_slice();
        let g = grad.as_slice();
        let mut next = self.clone();
        next.step_count += 1;

        let updated: Vec<T> = match self.config.kind {
            OptimizerKind::VanillaSgd => w.iter().zip(g).map(|(&wi, &gi)| wi - lr * (gi + decay * wi)).collect(),
            OptimizerKind::SgdMomentum => {
                let beta = T::of(self.config.momentum);
                let buffer: Vec<T> = match &self.first_moment {
                    Some(buf) => buf
                        .iter()
                        .zip(w.iter().zip(g))
                        .map(|(&b, (&wi, &gi))| beta * b + gi + decay * wi)
                        .collect(),
                    None => w.iter().zip(g).map(|(&wi, &gi)| gi + decay * wi).collect(),
                };
                let out = w.iter().zip(&buffer).map(|(&wi, &bi)| wi - lr * bi).collect();
                next.first_moment = Some(ParamVector::new(buffer)?);
                out
            }
            OptimizerKind::Adam | OptimizerKind::Adamw => {
                let decoupled = self.config.kind == OptimizerKind::Adamw;
                let (b1, b2) = (T::of(self.config.betas.0), T::of(self.config.betas.1));
                let eps = T::of(self.config.epsilon);
                let len = w.len();
                let zeros = ParamVector::zeros(len);
                let m_prev = self.first_moment.as_ref().unwrap_or(&zeros);
                let v_prev = self.second_moment.as_ref().unwrap_or(&zeros);
                let t = next.step_count as i32;
                let bias1 = T::one() - b1.powi(t);
                let bias2 = T::one() - b2.powi(t);
                let mut m = Vec::with_capacity(len);
                let mut v = Vec::with_capacity(len);
                let mut out = Vec::with_capacity(len);
                for i in 0..len {
                    let gi = if decoupled { g[i] } else { g[i] + decay * w[i] };
                    let mi = b1 * m_prev.as_slice()[i] + (T::one() - b1) * gi;
                    let vi = b2 * v_prev.as_slice()[i] + (T::one() - b2) * gi * gi;
                    let m_hat = mi / bias1;
                    let v_hat = vi / bias2;
                    let base = if decoupled { w[i] - lr * decay * w[i] } else { w[i] };
                    out.push(base - lr * m_hat / (v_hat.sqrt() + eps));
                    m.push(mi);
                    v.push(vi);
                }
                next.first_moment = Some(ParamVector::new(m)?);
                next.second_moment = Some(ParamVector::new(v)?);
                out
            }
        };
        Ok((ParamVector::new(updated)?, next))
    }
}

/// Recovers the optimizer update `(before - after) / lr`.
pub fn extract_update<T: Scalar>(
    before: &ParamVector<T>,
    after: &ParamVector<T>,
    learning_rate: T,
) -> Result<ParamVector<T>> {
    if learning_rate == T::zero() {
        return Err(Error::ZeroLearningRate);
    }
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            expected: before.len(),
            found: after.len(),
        });
    }
    ParamVector::new(
        before
            .iter()
            .zip(after.iter())
            .map(|(&b, &a)| (b - a) / learning_rate)
            .collect(),
    )
}
