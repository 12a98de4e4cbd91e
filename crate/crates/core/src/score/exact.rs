//! Analytic scores of Gaussian data and of Uniform[0,1]^d data.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::data::Gaussian;
use crate::error::{check_dim, Error, Result};
use crate::normal;
use crate::process::{DiffusionProcess, ProcessKind};
use crate::scalar::Real;

/// `s(x, t) = −C(t)⁻¹ (x − α(t)μ)` with `C(t) = α(t)²Σ + a(t) I`.
///
/// For VE `α = 1` and `a = v(t)`, which is the familiar `−(Σ + v(t)I)⁻¹(x − μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore<T> {
    pub proc: DiffusionProcess<T>,
    pub data: Gaussian<T>,
}

impl<T: Real> GaussianScore<T> {
    pub fn new(proc: DiffusionProcess<T>, data: Gaussian<T>) -> Result<Self> {
        check_dim(proc.dim, data.dim())?;
        Ok(Self { proc, data })
    }

    pub fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        let m = self.proc.marginal(t)?;
        let a2 = m.mean_scale * m.mean_scale;
        let centred: Vec<T> = x.iter().zip(&self.data.mean).map(|(&xi, &mu)| xi - m.mean_scale * mu).collect();
        self.data
            .eigen
            .apply_spectral(&centred, |l| -T::one() / (a2 * l + m.added_variance), out);
        Ok(())
    }

    /// `−tr C(t)⁻¹`.
    pub fn divergence(&self, t: T) -> Result<T> {
        let m = self.proc.marginal(t)?;
        Ok(-self.data.marginal_spectrum(m).map(|l| T::one() / l).sum::<T>())
    }

    /// `E‖s‖²` under `p_t`, which equals `tr C(t)⁻¹`.
    pub fn expected_norm_sq(&self, t: T) -> Result<T> {
        Ok(-self.divergence(t)?)
    }
}

/// Gaussian-data score as a free function of explicit parameters.
pub fn gaussian_score<T: Real>(
    x: &[T],
    t: T,
    mean: &[T],
    covariance: &[T],
    proc: &DiffusionProcess<T>,
) -> Result<Vec<T>> {
    check_dim(proc.dim, x.len())?;
    check_dim(proc.dim, mean.len())?;
    let g = Gaussian::new(mean.to_vec(), covariance)?;
    let s = GaussianScore::new(*proc, g)?;
    let mut out = vec![T::zero(); x.len()];
    s.evaluate(x, t, &mut out)?;
    Ok(out)
}

/// Coordinate-wise score of Uniform[0,1]^d diffused by a VE process,
/// evaluated in `f64` through log-domain normal functions.
#[derive(Debug)]
pub struct UniformScore<T> {
    pub proc: DiffusionProcess<T>,
    pub floor: f64,
    clamp_events: AtomicU64,
}

impl<T: Clone> Clone for UniformScore<T> {
    fn clone(&self) -> Self {
        Self {
            proc: self.proc.clone(),
            floor: self.floor,
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

impl<T: PartialEq> PartialEq for UniformScore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.proc == other.proc && self.floor == other.floor
    }
}

impl<T: Real> UniformScore<T> {
    pub fn new(proc: DiffusionProcess<T>) -> Result<Self> {
        if proc.kind != ProcessKind::Ve {
            return Err(Error::Unsupported { op: "exact uniform score", what: "VP processes".into() });
        }
        Ok(Self { proc, floor: normal::DENOMINATOR_FLOOR, clamp_events: AtomicU64::new(0) })
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    /// How many coordinate evaluations hit the denominator floor so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    fn noise_scale(&self, t: T) -> Result<f64> {
        Ok(self.proc.variance_increment(t)?.as_f64().sqrt())
    }

    /// Returns whether any coordinate engaged the floor.
    pub fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<bool> {
        let s = self.noise_scale(t)?;
        let mut any = false;
        for (o, &xi) in out.iter_mut().zip(x) {
            let (v, clamped) = normal::uniform_score(xi.as_f64(), s, self.floor);
            any |= clamped;
            *o = T::lit(v);
        }
        if any {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
        }
        Ok(any)
    }

    pub fn divergence(&self, x: &[T], t: T) -> Result<T> {
        let s = self.noise_scale(t)?;
        Ok(x.iter()
            .map(|&xi| T::lit(normal::uniform_score_derivative(xi.as_f64(), s, self.floor)))
            .sum())
    }
}

/// One-dimensional uniform-data score at `(x, t)` and the clamp flag.
pub fn uniform_score<T: Real>(x: T, t: T, proc: &DiffusionProcess<T>) -> Result<(T, bool)> {
    let u = UniformScore::new(*proc)?;
    let s = u.noise_scale(t)?;
    let (v, c) = normal::uniform_score(x.as_f64(), s, u.floor);
    Ok((T::lit(v), c))
}
