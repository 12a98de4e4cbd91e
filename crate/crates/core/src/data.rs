//! Synthetic data distributions with closed-form (or quadrature) entropies.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, SymmetricEigen};
use crate::normal;
use crate::process::{DiffusionProcess, MarginalTransition};
use crate::rng::{self, fill_normal, fill_uniform};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    GaussianProduct,
    GaussianFull,
    UniformUnit,
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataKind::GaussianProduct => "gaussian-product",
            DataKind::GaussianFull => "gaussian-full",
            DataKind::UniformUnit => "uniform-unit",
        })
    }
}

/// Description of a data distribution as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub enum DatasetSpec<T> {
    /// Independent coordinates `N(mean_i, variance_i)`.
    GaussianProduct { mean: Vec<T>, variance: Vec<T> },
    /// `N(mean, covariance)` with a full covariance matrix (rows).
    GaussianFull { mean: Vec<T>, covariance: Vec<Vec<T>> },
    /// Uniform on the unit cube `[0, 1]^dim`.
    UniformUnit { dim: usize },
}

impl<T: Real> DatasetSpec<T> {
    pub fn standard_gaussian(dim: usize) -> Self {
        DatasetSpec::GaussianProduct { mean: vec![T::zero(); dim], variance: vec![T::one(); dim] }
    }

    pub fn uniform(dim: usize) -> Self {
        DatasetSpec::UniformUnit { dim }
    }

    pub fn kind(&self) -> DataKind {
        match self {
            DatasetSpec::GaussianProduct { .. } => DataKind::GaussianProduct,
            DatasetSpec::GaussianFull { .. } => DataKind::GaussianFull,
            DatasetSpec::UniformUnit { .. } => DataKind::UniformUnit,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::GaussianProduct { mean, .. } | DatasetSpec::GaussianFull { mean, .. } => mean.len(),
            DatasetSpec::UniformUnit { dim } => *dim,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        !matches!(self, DatasetSpec::UniformUnit { .. })
    }

    /// Validates shapes and positive-definiteness and precomputes what
    /// sampling and scoring need.
    pub fn prepare(&self) -> Result<Dataset<T>> {
        match self {
            DatasetSpec::GaussianProduct { mean, variance } => {
                check_dim(mean.len(), variance.len())?;
                if mean.is_empty() {
                    return Err(Error::InvalidParameter("data dimension must be positive".into()));
                }
                if variance.iter().any(|&v| !(v > T::zero())) {
                    return Err(Error::NotSpd);
                }
                Ok(Dataset::Gaussian(Gaussian::from_eigen(mean.clone(), linalg::diagonal(variance.clone()))))
            }
            DatasetSpec::GaussianFull { mean, covariance } => {
                let d = mean.len();
                if d == 0 {
                    return Err(Error::InvalidParameter("data dimension must be positive".into()));
                }
                check_dim(d, covariance.len())?;
                let mut flat = Vec::with_capacity(d * d);
                for row in covariance {
                    check_dim(d, row.len())?;
                    flat.extend_from_slice(row);
                }
                Ok(Dataset::Gaussian(Gaussian::new(mean.clone(), &flat)?))
            }
            DatasetSpec::UniformUnit { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidParameter("data dimension must be positive".into()));
                }
                Ok(Dataset::Uniform { dim: *dim })
            }
        }
    }
}

/// `N(μ, Σ)` with its eigendecomposition cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian<T> {
    pub mean: Vec<T>,
    pub eigen: SymmetricEigen<T>,
}

impl<T: Real> Gaussian<T> {
    pub fn new(mean: Vec<T>, covariance: &[T]) -> Result<Self> {
        let eigen = SymmetricEigen::decompose_spd(covariance, mean.len())?;
        Ok(Self { mean, eigen })
    }

    pub fn standard(dim: usize) -> Self {
        Self::from_eigen(vec![T::zero(); dim], linalg::diagonal(vec![T::one(); dim]))
    }

    fn from_eigen(mean: Vec<T>, eigen: SymmetricEigen<T>) -> Self {
        Self { mean, eigen }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Eigenvalues of the marginal covariance `α²Σ + a I`.
    pub fn marginal_spectrum(&self, m: MarginalTransition<T>) -> impl Iterator<Item = T> + '_ {
        let a2 = m.mean_scale * m.mean_scale;
        self.eigen.values.iter().map(move |&l| a2 * l + m.added_variance)
    }

    pub fn entropy(&self) -> T {
        let d = T::from_usize_lossy(self.dim());
        let logdet: T = self.eigen.values.iter().map(|l| l.ln()).sum();
        T::lit(0.5) * (d * (T::TAU() * T::E()).ln() + logdet)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [T]) {
        let d = self.dim();
        let mut z = vec![T::zero(); d];
        fill_normal(rng, &mut z);
        self.eigen.apply_spectral(&z, |l| l.sqrt(), out);
        for (o, &m) in out.iter_mut().zip(&self.mean) {
            *o += m;
        }
    }

    pub fn log_density(&self, x: &[T]) -> T {
        let r: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        let mut y = vec![T::zero(); r.len()];
        self.eigen.apply_spectral(&r, |l| T::one() / l, &mut y);
        let d = T::from_usize_lossy(self.dim());
        T::lit(0.5) * (d - crate::scalar::dot(&r, &y)) - self.entropy()
    }

    pub fn second_moment(&self) -> T {
        self.mean.iter().map(|&m| m * m).sum::<T>() + self.eigen.values.iter().copied().sum::<T>()
    }
}

/// A validated data distribution ready for sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset<T> {
    Gaussian(Gaussian<T>),
    Uniform { dim: usize },
}

impl<T: Real> Dataset<T> {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Gaussian(g) => g.dim(),
            Dataset::Uniform { dim } => *dim,
        }
    }

    pub fn gaussian(&self) -> Option<&Gaussian<T>> {
        match self {
            Dataset::Gaussian(g) => Some(g),
            Dataset::Uniform { .. } => None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Dataset::Uniform { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [T]) {
        match self {
            Dataset::Gaussian(g) => g.sample(rng, out),
            Dataset::Uniform { .. } => fill_uniform(rng, out),
        }
    }

    /// Draws `x_t = α x₀ + √a z` from the forward marginal at `t`.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, m: MarginalTransition<T>, rng: &mut R, out: &mut [T]) {
        self.sample(rng, out);
        let mut z = vec![T::zero(); out.len()];
        fill_normal(rng, &mut z);
        let sd = m.added_variance.sqrt();
        for (o, &zi) in out.iter_mut().zip(&z) {
            *o = m.mean_scale * *o + sd * zi;
        }
    }

    /// `n` draws from `p_t`, flattened. Draw `i` uses the stream
    /// `(seed, key, i)`, so equal keys reproduce the same `(x₀, z)` pairs.
    pub fn marginal_batch(&self, proc: &DiffusionProcess<T>, t: T, n: usize, seed: u64, key: u64) -> Result<Vec<T>> {
        check_dim(proc.dim, self.dim())?;
        let m = proc.marginal(t)?;
        let d = self.dim();
        let base = rng::derive(seed, rng::domain::DATA, key);
        let mut out = vec![T::zero(); n * d];
        out.par_chunks_mut(d.max(1)).enumerate().for_each(|(i, x)| {
            self.sample_marginal(m, &mut rng::stream(base, i as u64, 0), x);
        });
        Ok(out)
    }

    /// `n` draws from `p₀`, flattened, addressed like [`Dataset::marginal_batch`].
    pub fn batch(&self, n: usize, seed: u64, key: u64) -> Vec<T> {
        let d = self.dim();
        let base = rng::derive(seed, rng::domain::DATA, key);
        let mut out = vec![T::zero(); n * d];
        out.par_chunks_mut(d.max(1)).enumerate().for_each(|(i, x)| {
            self.sample(&mut rng::stream(base, i as u64, 0), x);
        });
        out
    }

    /// Differential entropy `S₀` of the data (nats).
    pub fn entropy(&self) -> T {
        match self {
            Dataset::Gaussian(g) => g.entropy(),
            Dataset::Uniform { .. } => T::zero(),
        }
    }

    /// `ln p₀(x)`; `x` is assumed to lie in the support.
    pub fn log_density(&self, x: &[T]) -> T {
        match self {
            Dataset::Gaussian(g) => g.log_density(x),
            Dataset::Uniform { .. } => T::zero(),
        }
    }

    /// `E‖x₀‖²`.
    pub fn second_moment(&self) -> T {
        match self {
            Dataset::Gaussian(g) => g.second_moment(),
            Dataset::Uniform { dim } => T::from_usize_lossy(*dim) / T::lit(3.0),
        }
    }

    /// Per-coordinate variance averaged over coordinates.
    pub fn mean_variance(&self) -> T {
        match self {
            Dataset::Gaussian(g) => {
                g.eigen.values.iter().copied().sum::<T>() / T::from_usize_lossy(g.dim())
            }
            Dataset::Uniform { .. } => T::one() / T::lit(12.0),
        }
    }

    /// Entropy (nats) of the forward marginal `p_t`.
    pub fn marginal_entropy(&self, proc: &DiffusionProcess<T>, t: T) -> Result<T> {
        let m = proc.marginal(t)?;
        Ok(match self {
            Dataset::Gaussian(g) => {
                let c = T::lit(0.5) * (T::TAU() * T::E()).ln();
                g.marginal_spectrum(m).map(|l| c + T::lit(0.5) * l.ln()).sum()
            }
            Dataset::Uniform { dim } => {
                // α·U ⊛ N(0, a) = α·(U ⊛ N(0, a/α²))
                let alpha = m.mean_scale.as_f64();
                let s = (m.added_variance.as_f64()).sqrt() / alpha;
                let h = alpha.ln() + normal::uniform_convolution_entropy(s);
                T::lit(h) * T::from_usize_lossy(*dim)
            }
        })
    }

    /// Cross-entropy `−E_{p₁}[ln π]` of the terminal marginal against the prior.
    pub fn prior_cross_entropy(&self, proc: &DiffusionProcess<T>) -> T {
        let m = proc.marginal_unchecked(T::one());
        let c = proc.prior_variance();
        let d = T::from_usize_lossy(self.dim());
        let second = m.mean_scale * m.mean_scale * self.second_moment() + d * m.added_variance;
        T::lit(0.5) * (d * (T::TAU() * c).ln() + second / c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn log_density_matches_product_form() {
        let d = DatasetSpec::GaussianProduct { mean: vec![1.0, -2.0], variance: vec![1.0, 4.0] }
            .prepare()
            .unwrap();
        let x = [0.5f64, 1.0];
        let expect = -0.5 * (0.25 + 9.0 / 4.0) - (2.0 * std::f64::consts::PI).ln() - 0.5 * 4f64.ln();
        assert!((d.log_density(&x) - expect).abs() < 1e-12);
    }

    #[test]
    fn gaussian_entropy_examples() {
        let s = DatasetSpec::<f64>::standard_gaussian(1).prepare().unwrap();
        assert!((s.entropy() - 1.418_938_533_204_672_7).abs() < 1e-12);
        let d = DatasetSpec::GaussianProduct { mean: vec![0.0, 0.0], variance: vec![1.0, 4.0] }
            .prepare()
            .unwrap();
        assert!((d.entropy() - (2.0 * 1.418_938_533_204_672_7 + 0.5 * 4f64.ln())).abs() < 1e-12);
        assert!((d.entropy() - 3.531_03).abs() < 1e-5);
        assert_eq!(DatasetSpec::<f64>::uniform(7).prepare().unwrap().entropy(), 0.0);
    }

    #[test]
    fn full_covariance_sampling_moments() {
        let spec = DatasetSpec::GaussianFull {
            mean: vec![1.0, -2.0],
            covariance: vec![vec![2.0, 0.6], vec![0.6, 1.0]],
        };
        let data = spec.prepare().unwrap();
        let mut rng = stream(11, 0, 0);
        let n = 200_000;
        let (mut m0, mut m1, mut c01) = (0.0, 0.0, 0.0);
        let mut x = [0.0; 2];
        for _ in 0..n {
            data.sample(&mut rng, &mut x);
            m0 += x[0];
            m1 += x[1];
            c01 += (x[0] - 1.0) * (x[1] + 2.0);
        }
        let nf = n as f64;
        assert!((m0 / nf - 1.0).abs() < 0.02 && (m1 / nf + 2.0).abs() < 0.02);
        assert!((c01 / nf - 0.6).abs() < 0.02);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = DatasetSpec::GaussianFull { mean: vec![0.0, 0.0], covariance: vec![vec![1.0, 2.0], vec![2.0, 1.0]] };
        assert!(matches!(bad.prepare(), Err(Error::NotSpd)));
        let shape = DatasetSpec::GaussianProduct { mean: vec![0.0], variance: vec![1.0, 1.0] };
        assert!(matches!(shape.prepare(), Err(Error::DimensionMismatch { .. })));
        assert!(DatasetSpec::<f64>::uniform(0).prepare().is_err());
    }

    #[test]
    fn marginal_entropy_of_standard_gaussian_under_vp_is_constant() {
        let data = DatasetSpec::<f64>::standard_gaussian(3).prepare().unwrap();
        let p = DiffusionProcess::vp(10.0, 0.5, 3).unwrap();
        for &t in &[0.0, 0.3, 1.0] {
            assert!((data.marginal_entropy(&p, t).unwrap() - data.entropy()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_marginal_entropy_grows_toward_gaussian() {
        let data = DatasetSpec::<f64>::uniform(1).prepare().unwrap();
        let p = DiffusionProcess::ve(10.0, 1).unwrap();
        let h1 = data.marginal_entropy(&p, 1.0).unwrap();
        let v1 = p.variance_increment(1.0).unwrap();
        assert!((h1 - normal::gaussian_entropy_1d(v1 + 1.0 / 12.0)).abs() < 1e-4);
        assert!(data.marginal_entropy(&p, 1e-4).unwrap() < 0.05);
    }

    #[test]
    fn cross_entropy_exceeds_entropy() {
        let data = DatasetSpec::<f64>::standard_gaussian(2).prepare().unwrap();
        let p = DiffusionProcess::ve(10.0, 2).unwrap();
        let ce = data.prior_cross_entropy(&p);
        let h = data.marginal_entropy(&p, 1.0).unwrap();
        assert!(ce > h);
        // KL(N(0,22.498) ‖ N(0,21.498)) per coordinate
        let r = 22.498_204_3 / 21.498_204_3f64;
        assert!((ce - h - 2.0 * 0.5 * (r - 1.0 - r.ln())).abs() < 1e-6);
    }
}
