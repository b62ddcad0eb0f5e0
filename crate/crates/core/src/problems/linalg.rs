//! Small dense linear algebra in `f64` for problem construction.

use crate::error::{Error, Result};

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// `Q diag(eigenvalues) Q^T`, symmetrized so `a_ij == a_ji` bit for bit.
    pub fn from_eigen(q_columns: &[Vec<f64>], eigenvalues: &[f64]) -> Self {
        let n = eigenvalues.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..n).map(|k| q_columns[k][i] * eigenvalues[k] * q_columns[k][j]).sum();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    /// Solves `self * x = b` for symmetric positive definite `self`.
    pub fn cholesky_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.at(i, j);
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::Unsupported("matrix is not positive definite".into()));
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (b[i] - s) / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
            x[i] = (y[i] - s) / l[i * n + i];
        }
        Ok(x)
    }

    /// Largest eigenvalue of a symmetric positive semidefinite matrix.
    pub fn max_eigenvalue(&self) -> f64 {
        let n = self.n;
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let w = self.matvec(&v);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let converged = (norm - lambda).abs() <= 1e-13 * norm;
            lambda = norm;
            v = next;
            if converged {
                break;
            }
        }
        lambda
    }
}

/// Orthonormalizes `columns` in place (modified Gram-Schmidt, two passes).
pub(crate) fn orthonormalize(columns: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..columns.len() {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
                let prev = columns[j].clone();
                for (x, p) in columns[i].iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm = columns[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Unsupported("degenerate random basis".into()));
        }
        for x in &mut columns[i] {
            *x /= norm;
        }
    }
    Ok(())
}
