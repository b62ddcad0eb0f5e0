use super::linalg::{orthonormalize, Matrix};
use crate::error::{Error, Result};
use crate::param::{gaussian, ParamVector, Rng, Seed, Stream};
use crate::scalar::Scalar;

/// `F(w) = 1/2 (w - w*)^T A (w - w*)` with eigenvalues of `A` in `[mu, L]`.
///
/// Gradient queries add zero-mean Gaussian noise with per-coordinate variance
/// `sigma^2 / d`, so the expected squared norm of the noise is `sigma^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic<T> {
    curvature: Vec<T>,
    dim: usize,
    eigenvalues: Vec<f64>,
    optimum: ParamVector<T>,
    sigma: f64,
}

impl<T: Scalar> Quadratic<T> {
    /// Random rotation of a spectrum that contains `mu` and `l` exactly; the
    /// other eigenvalues are log-uniform in between. `w*` is standard normal.
    /// With `dim == 1` the single eigenvalue is `mu`.
    pub fn random(dim: usize, mu: f64, l: f64, sigma: f64, seed: Seed) -> Result<Self> {
        validate(dim, mu, l, sigma)?;
        let mut rng = seed.stream(Stream::Problem, 0, 0);
        let eigenvalues: Vec<f64> = (0..dim)
            .map(|i| match i {
                0 => mu,
                1 => l,
                _ => {
                    let u: f64 = rand::Rng::random(&mut rng);
                    (mu.ln() + u * (l.ln() - mu.ln())).exp().clamp(mu, l)
                }
            })
            .collect();
        let mut basis: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| gaussian::<f64>(&mut rng, 1.0)).collect())
            .collect();
        orthonormalize(&mut basis)?;
        let matrix = Matrix::from_eigen(&basis, &eigenvalues);
        let optimum: Vec<f64> = (0..dim).map(|_| gaussian::<f64>(&mut rng, 1.0)).collect();
        Self::from_parts(matrix, eigenvalues, &optimum, sigma)
    }

    /// `A = diag(eigenvalues)`.
    pub fn diagonal(eigenvalues: &[f64], optimum: &[f64], sigma: f64) -> Result<Self> {
        let dim = eigenvalues.len();
        if optimum.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                found: optimum.len(),
            });
        }
        let mu = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let l = eigenvalues.iter().cloned().fold(0.0, f64::max);
        validate(dim, mu, l, sigma)?;
        let mut matrix = Matrix::zeros(dim);
        for (i, &e) in eigenvalues.iter().enumerate() {
            matrix.set(i, i, e);
        }
        Self::from_parts(matrix, eigenvalues.to_vec(), optimum, sigma)
    }

    fn from_parts(matrix: Matrix, eigenvalues: Vec<f64>, optimum: &[f64], sigma: f64) -> Result<Self> {
        Ok(Self {
            curvature: matrix.data.iter().map(|&v| T::of(v)).collect(),
            dim: matrix.n,
            eigenvalues,
            optimum: ParamVector::from_f64(optimum)?,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn optimum(&self) -> &ParamVector<T> {
        &self.optimum
    }

    pub fn mu(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn smoothness(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(0.0, f64::max)
    }

    fn check(&self, params: &ParamVector<T>) -> Result<()> {
        if params.len() == self.dim {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                expected: self.dim,
                found: params.len(),
            })
        }
    }

    /// Returns `(F(w), A (w - w*))`.
    pub fn loss_and_gradient(&self, params: &ParamVector<T>) -> Result<(T, ParamVector<T>)> {
        self.check(params)?;
        let offset: Vec<T> = params.iter().zip(self.optimum.iter()).map(|(&w, &o)| w - o).collect();
        let grad: Vec<T> = (0..self.dim)
            .map(|i| {
                self.curvature[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(&offset)
                    .fold(T::zero(), |acc, (&a, &x)| acc + a * x)
            })
            .collect();
        let quad = offset.iter().zip(&grad).fold(T::zero(), |acc, (&x, &g)| acc + x * g);
        Ok((quad / T::of(2.0), ParamVector::new(grad)?))
    }

    pub fn noisy_gradient(&self, params: &ParamVector<T>, rng: &mut Rng) -> Result<(T, ParamVector<T>)> {
        let (loss, grad) = self.loss_and_gradient(params)?;
        if self.sigma == 0.0 {
            return Ok((loss, grad));
        }
        let std = self.sigma / (self.dim as f64).sqrt();
        let noisy = grad.iter().map(|&g| g + gaussian::<T>(rng, std)).collect();
        Ok((loss, ParamVector::new(noisy)?))
    }
}

fn validate(dim: usize, mu: f64, l: f64, sigma: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidConfig("problem.d: must be positive".into()));
    }
    if !(mu > 0.0 && l >= mu && l.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "problem.mu: quadratic needs 0 < mu <= L (mu={mu}, L={l})"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "problem.sigma: must be >= 0, got {sigma}"
        )));
    }
    Ok(())
}
