//! Small dense symmetric eigendecomposition (cyclic Jacobi).
//!
//! Dimensions here are tiny (d ≤ 64), so a dependency-free Jacobi sweep is
//! accurate and fast enough, and it stays generic over the scalar type.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `A = Q diag(λ) Qᵀ` with eigenvectors stored as the columns of `Q`
/// (row-major `d × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen<T> {
    pub dim: usize,
    pub values: Vec<T>,
    pub vectors: Vec<T>,
}

impl<T: Real> SymmetricEigen<T> {
    pub fn decompose(a: &[T], dim: usize) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: a.len() });
        }
        let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let sym_tol = T::lit(1e-10) * scale.max(T::one());
        for i in 0..dim {
            for j in 0..i {
                if (a[i * dim + j] - a[j * dim + i]).abs() > sym_tol {
                    return Err(Error::NotSpd);
                }
            }
        }
        let mut m = a.to_vec();
        let mut q = vec![T::zero(); dim * dim];
        for i in 0..dim {
            q[i * dim + i] = T::one();
        }
        let eps = T::epsilon();
        for _sweep in 0..100 {
            let mut off = T::zero();
            for i in 0..dim {
                for j in 0..i {
                    off += m[i * dim + j] * m[i * dim + j];
                }
            }
            if off.sqrt() <= eps * scale.max(T::min_positive_value()) {
                break;
            }
            for p in 0..dim {
                for r in p + 1..dim {
                    let apr = m[p * dim + r];
                    if apr == T::zero() {
                        continue;
                    }
                    let app = m[p * dim + p];
                    let arr = m[r * dim + r];
                    let theta = (arr - app) / (T::lit(2.0) * apr);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..dim {
                        let mkp = m[k * dim + p];
                        let mkr = m[k * dim + r];
                        m[k * dim + p] = c * mkp - s * mkr;
                        m[k * dim + r] = s * mkp + c * mkr;
                    }
                    for k in 0..dim {
                        let mpk = m[p * dim + k];
                        let mrk = m[r * dim + k];
                        m[p * dim + k] = c * mpk - s * mrk;
                        m[r * dim + k] = s * mpk + c * mrk;
                    }
                    for k in 0..dim {
                        let qkp = q[k * dim + p];
                        let qkr = q[k * dim + r];
                        q[k * dim + p] = c * qkp - s * qkr;
                        q[k * dim + r] = s * qkp + c * qkr;
                    }
                }
            }
        }
        let values = (0..dim).map(|i| m[i * dim + i]).collect();
        Ok(Self { dim, values, vectors: q })
    }

    /// Decomposes and requires every eigenvalue to be strictly positive.
    pub fn decompose_spd(a: &[T], dim: usize) -> Result<Self> {
        let e = Self::decompose(a, dim)?;
        if e.values.iter().any(|&l| !(l > T::zero())) {
            return Err(Error::NotSpd);
        }
        Ok(e)
    }

    pub fn is_diagonal_basis(&self) -> bool {
        (0..self.dim).all(|i| {
            (0..self.dim).all(|j| {
                let v = self.vectors[i * self.dim + j];
                if i == j { v == T::one() } else { v == T::zero() }
            })
        })
    }

    /// `out = Q diag(f(λ)) Qᵀ x`.
    pub fn apply_spectral(&self, x: &[T], f: impl Fn(T) -> T, out: &mut [T]) {
        let d = self.dim;
        if self.is_diagonal_basis() {
            for i in 0..d {
                out[i] = f(self.values[i]) * x[i];
            }
            return;
        }
        let mut proj = vec![T::zero(); d];
        for (k, p) in proj.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in 0..d {
                acc += self.vectors[i * d + k] * x[i];
            }
            *p = acc * f(self.values[k]);
        }
        for i in 0..d {
            let mut acc = T::zero();
            for (k, p) in proj.iter().enumerate() {
                acc += self.vectors[i * d + k] * *p;
            }
            out[i] = acc;
        }
    }
}

/// Builds the eigen-structure of a diagonal matrix without iterating.
pub(crate) fn diagonal<T: Real>(values: Vec<T>) -> SymmetricEigen<T> {
    let dim = values.len();
    let mut vectors = vec![T::zero(); dim * dim];
    for i in 0..dim {
        vectors[i * dim + i] = T::one();
    }
    SymmetricEigen { dim, values, vectors }
}
