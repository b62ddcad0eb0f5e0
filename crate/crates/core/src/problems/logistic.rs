use super::data::Dataset;
use super::linalg::Matrix;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::scalar::Scalar;

/// Binary logistic regression, mean loss over examples plus `l2/2 |w|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic<T> {
    data: Dataset<T>,
    l2: f64,
    smoothness: f64,
    optimum: Option<(ParamVector<T>, T)>,
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Logistic<T> {
    /// Computes `L` from the data and, when it exists, the minimizer by damped
    /// Newton iterations in `f64`. Without regularization on separable data
    /// there is no minimizer and [`Logistic::optimum`] is `None`.
    pub fn new(data: Dataset<T>, l2: f64) -> Result<Self> {
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "problem.mu (l2 strength) must be >= 0, got {l2}"
            )));
        }
        if data.is_empty() {
            return Err(Error::Empty("logistic dataset"));
        }
        let gram = gram(&data);
        let smoothness = gram.max_eigenvalue() / 4.0 + l2;
        let mut problem = Self {
            data,
            l2,
            smoothness,
            optimum: None,
        };
        if let Some(w) = problem.newton() {
            let w = ParamVector::from_f64(&w)?;
            let loss = problem.loss(&w)?;
            problem.optimum = Some((w, loss));
        }
        Ok(problem)
    }

    pub fn data(&self) -> &Dataset<T> {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Minimizer and minimum value.
    pub fn optimum(&self) -> Option<&(ParamVector<T>, T)> {
        self.optimum.as_ref()
    }

    /// Mean loss and gradient over `indices` (repeats allowed).
    pub fn batch_loss_and_gradient(&self, params: &ParamVector<T>, indices: &[usize]) -> Result<(T, ParamVector<T>)> {
        let d = self.dim();
        if params.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                found: params.len(),
            });
        }
        if indices.is_empty() {
            return Err(Error::Empty("logistic batch"));
        }
        let w = params.as_slice();
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); d];
        for &i in indices {
            let (x, y) = self.data.example(i)?;
            let z = x.iter().zip(w).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            loss = loss + softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, &a) in grad.iter_mut().zip(x) {
                *g = *g + r * a;
            }
        }
        let n = T::of_count(indices.len());
        let l2 = T::of(self.l2);
        let reg = w.iter().fold(T::zero(), |acc, &v| acc + v * v) * l2 / T::of(2.0);
        let grad = grad.iter().zip(w).map(|(&g, &v)| g / n + l2 * v).collect();
        Ok((loss / n + reg, ParamVector::new(grad)?))
    }

    pub fn loss_and_gradient(&self, params: &ParamVector<T>) -> Result<(T, ParamVector<T>)> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.batch_loss_and_gradient(params, &all)
    }

    pub fn loss(&self, params: &ParamVector<T>) -> Result<T> {
        Ok(self.loss_and_gradient(params)?.0)
    }

    fn newton(&self) -> Option<Vec<f64>> {
        let d = self.dim();
        let m = self.data.len() as f64;
        let rows: Vec<(Vec<f64>, f64)> = (0..self.data.len())
            .map(|i| {
                let (x, y) = self.data.example(i).expect("index in range");
                (x.iter().map(|v| v.as_f64()).collect(), y.as_f64())
            })
            .collect();
        let objective = |w: &[f64]| -> f64 {
            let data: f64 = rows
                .iter()
                .map(|(x, y)| {
                    let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
                    softplus(z) - y * z
                })
                .sum();
            data / m + self.l2 / 2.0 * w.iter().map(|v| v * v).sum::<f64>()
        };
        let mut w = vec![0.0; d];
        let mut value = objective(&w);
        for _ in 0..200 {
            let mut grad = vec![0.0; d];
            let mut hess = Matrix::zeros(d);
            for (x, y) in &rows {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                let p = sigmoid(z);
                let s = p * (1.0 - p);
                for i in 0..d {
                    grad[i] += (p - y) * x[i];
                    for j in 0..=i {
                        hess.data[i * d + j] += s * x[i] * x[j];
                    }
                }
            }
            for i in 0..d {
                grad[i] = grad[i] / m + self.l2 * w[i];
                for j in 0..=i {
                    let v = hess.at(i, j) / m + if i == j { self.l2 } else { 0.0 };
                    hess.set(i, j, v);
                    hess.set(j, i, v);
                }
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                // A vanishing gradient with vanishing curvature means the loss
                // only approaches its infimum at infinity (separable data).
                let mut shifted = hess.clone();
                for i in 0..d {
                    shifted.data[i * d + i] -= 1e-8;
                }
                return shifted.cholesky_solve(&grad).ok().map(|_| w);
            }
            let step = hess.cholesky_solve(&grad).ok()?;
            let mut scale = 1.0;
            loop {
                let next: Vec<f64> = w.iter().zip(&step).map(|(a, s)| a - scale * s).collect();
                let next_value = objective(&next);
                if next_value <= value || scale < 1e-8 {
                    w = next;
                    value = next_value;
                    break;
                }
                scale /= 2.0;
            }
            if !w.iter().all(|v| v.is_finite()) {
                return None;
            }
        }
        None
    }
}

/// `X^T X / M`.
fn gram<T: Scalar>(data: &Dataset<T>) -> Matrix {
    let d = data.dim();
    let mut g = Matrix::zeros(d);
    for row in data.features().chunks(d) {
        for i in 0..d {
            for j in 0..=i {
                g.data[i * d + j] += row[i].as_f64() * row[j].as_f64();
            }
        }
    }
    let m = data.len() as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = g.at(i, j) / m;
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}
