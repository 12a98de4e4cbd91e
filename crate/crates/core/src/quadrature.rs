//! Time grids and trapezoid quadrature with Monte-Carlo error propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::DiffusionProcess;
use crate::scalar::Real;
use crate::stats::Estimate;

/// Lower clipping point of all time integrals.
pub const T_MIN: f64 = 1e-4;
/// Upper clipping point of all time integrals.
pub const T_MAX: f64 = 1.0 - 1e-4;
/// Default number of grid points.
pub const DEFAULT_GRID_POINTS: usize = 64;

/// Node placement of a [`TimeGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridSpacing {
    /// Evenly spaced in `t`.
    Uniform,
    /// Evenly spaced in the log noise-to-signal clock `λ(t) = ln(a/α²)`,
    /// with trapezoid weights taken in `λ`.
    #[default]
    LogNoise,
}

/// Clipped time grid with trapezoid weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    times: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn uniform(t_min: T, t_max: T, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::EmptyGrid);
        }
        if !(t_min < t_max) || t_min < T::zero() || t_max > T::one() {
            return Err(Error::InvalidParameter(format!(
                "grid range [{t_min}, {t_max}] must be increasing inside [0, 1]"
            )));
        }
        let n = points - 1;
        let h = (t_max - t_min) / T::from_usize_lossy(n);
        let times = (0..points)
            .map(|k| if k == n { t_max } else { t_min + h * T::from_usize_lossy(k) })
            .collect();
        Self::from_times(times)
    }

    /// Nodes evenly spaced in `λ(t) = ln(a/α²)`. Weights are `Δλ`-trapezoid
    /// weights times `dt/dλ`, so `integrate` still approximates `∫ h dt`
    /// and `Σ w_k g_k² h_k` is the trapezoid rule for `∫ a h dλ`.
    pub fn log_noise(proc: &DiffusionProcess<T>, t_min: T, t_max: T, points: usize) -> Result<Self> {
        let base = Self::uniform(t_min, t_max, points)?;
        let (lo, hi) = (t_min.as_f64(), t_max.as_f64());
        let (l0, l1) = (proc.log_noise_clock(t_min).as_f64(), proc.log_noise_clock(t_max).as_f64());
        let n = points - 1;
        let h = (l1 - l0) / n as f64;
        let times: Vec<T> = (0..points)
            .map(|k| match k {
                0 => base.t_min(),
                k if k == n => base.t_max(),
                k => T::lit(proc.time_at_log_noise(l0 + h * k as f64, lo, hi)),
            })
            .collect();
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("log-noise grid is too fine for the time range".into()));
        }
        let weights = times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let half = if k == 0 || k == n { 0.5 } else { 1.0 };
                T::lit(half * h) * proc.clock_jacobian(t)
            })
            .collect();
        Ok(Self { times, weights })
    }

    pub fn with_spacing(
        spacing: GridSpacing,
        proc: &DiffusionProcess<T>,
        t_min: T,
        t_max: T,
        points: usize,
    ) -> Result<Self> {
        match spacing {
            GridSpacing::Uniform => Self::uniform(t_min, t_max, points),
            GridSpacing::LogNoise => Self::log_noise(proc, t_min, t_max, points),
        }
    }

    /// Default clipped grid `[1e-4, 1 - 1e-4]`.
    pub fn clipped(points: usize) -> Result<Self> {
        Self::uniform(T::lit(T_MIN), T::lit(T_MAX), points)
    }

    /// Trapezoid weights for arbitrary strictly increasing nodes.
    pub fn from_times(times: Vec<T>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::EmptyGrid);
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter("grid times must be strictly increasing".into()));
        }
        let half = T::lit(0.5);
        let n = times.len();
        let mut weights = vec![T::zero(); n];
        for k in 0..n - 1 {
            let dt = (times[k + 1] - times[k]) * half;
            weights[k] += dt;
            weights[k + 1] += dt;
        }
        Ok(Self { times, weights })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    /// Trapezoid weights `Δt_k` (half-width at the ends).
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_min(&self) -> T {
        self.times[0]
    }

    pub fn t_max(&self) -> T {
        self.times[self.times.len() - 1]
    }

    pub fn integrate(&self, values: &[T]) -> T {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).fold(T::zero(), |acc, (&w, &v)| acc + w * v)
    }

    pub fn integrate_fn(&self, mut f: impl FnMut(T) -> T) -> T {
        self.times
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&t, &w)| acc + w * f(t))
    }

    /// Integrates per-node estimates that were drawn independently:
    /// `Var = Σ w_k² se_k²`.
    pub fn integrate_estimates(&self, values: &[Estimate<T>]) -> Estimate<T> {
        debug_assert_eq!(values.len(), self.len());
        let mut total = T::zero();
        let mut var = T::zero();
        for (w, e) in self.weights.iter().zip(values) {
            total += *w * e.value;
            var += *w * *w * e.stderr * e.stderr;
        }
        Estimate::new(total, var.sqrt())
    }
}
