//! Forward diffusion processes: variance exploding (VE) and variance
//! preserving (VP) with a linear rate schedule fixed by a noise budget.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{norm_sq, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    #[serde(alias = "VE")]
    Ve,
    #[serde(alias = "VP")]
    Vp,
}

impl std::fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProcessKind::Ve => "VE",
            ProcessKind::Vp => "VP",
        })
    }
}

/// Which variance the VE prior uses.
///
/// `Integrated` is `v(1) = ∫₀¹ g² = (σ²−1)/(2 ln σ)`; `HalfSquare` is the
/// `½(σ²−1)` variant, kept only for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorVariance {
    #[default]
    Integrated,
    HalfSquare,
}

pub const DEFAULT_VP_RATIO: f64 = 0.5;

fn default_ratio<T: Real>() -> T {
    T::lit(DEFAULT_VP_RATIO)
}

/// Forward SDE `dx = f(x,t) dt + g(t) dw` on `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Real"))]
pub struct DiffusionProcess<T> {
    pub kind: ProcessKind,
    /// Terminal noise scale σ.
    pub sigma: T,
    /// VP schedule ratio `β_min = r·B`; ignored for VE.
    #[serde(default = "default_ratio")]
    pub r: T,
    pub dim: usize,
    #[serde(default)]
    pub prior: PriorVariance,
}

/// Law of `x_t | x_0`: `N(mean_scale · x_0, added_variance · I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalTransition<T> {
    pub mean_scale: T,
    pub added_variance: T,
}

impl<T: Real> MarginalTransition<T> {
    /// Variance-exploding equivalent noise level `added_variance / mean_scale²`.
    pub fn noise_to_signal(&self) -> T {
        self.added_variance / (self.mean_scale * self.mean_scale)
    }
}

impl<T: Real> DiffusionProcess<T> {
    pub fn new(kind: ProcessKind, sigma: T, r: T, dim: usize) -> Result<Self> {
        let p = Self { kind, sigma, r, dim, prior: PriorVariance::Integrated };
        p.validate()?;
        Ok(p)
    }

    pub fn ve(sigma: T, dim: usize) -> Result<Self> {
        Self::new(ProcessKind::Ve, sigma, default_ratio(), dim)
    }

    pub fn vp(sigma: T, r: T, dim: usize) -> Result<Self> {
        Self::new(ProcessKind::Vp, sigma, r, dim)
    }

    pub fn with_prior(mut self, prior: PriorVariance) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Result<Self> {
        self.dim = dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if !self.sigma.is_finite() {
            return Err(Error::InvalidParameter("sigma must be finite".into()));
        }
        match self.kind {
            ProcessKind::Ve if !(self.sigma > T::one()) => Err(Error::InvalidParameter(format!(
                "VE requires sigma > 1, got {}",
                self.sigma
            ))),
            ProcessKind::Vp if !(self.sigma > T::zero()) => Err(Error::InvalidParameter(format!(
                "VP requires sigma > 0, got {}",
                self.sigma
            ))),
            ProcessKind::Vp if !(self.r > T::zero() && self.r < T::one()) => Err(
                Error::InvalidParameter(format!("VP ratio r must lie in (0, 1), got {}", self.r)),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_ve(&self) -> bool {
        self.kind == ProcessKind::Ve
    }

    fn check_time(t: T) -> Result<()> {
        if t >= T::zero() && t <= T::one() {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange { t: t.to_f64().unwrap_or(f64::NAN) })
        }
    }

    /// VP noise budget `B = ln(1 + σ²)`.
    pub fn noise_budget(&self) -> T {
        (self.sigma * self.sigma).ln_1p()
    }

    pub fn beta_min(&self) -> T {
        self.r * self.noise_budget()
    }

    pub fn beta_max(&self) -> T {
        (T::lit(2.0) - self.r) * self.noise_budget()
    }

    /// `∫₀ᵗ β(u) du` in closed form.
    pub fn integrated_rate(&self, t: T) -> T {
        let (lo, hi) = (self.beta_min(), self.beta_max());
        lo * t + T::lit(0.5) * t * t * (hi - lo)
    }

    /// `g(t)²`: `σ^{2t}` for VE, `β(t)` for VP.
    pub fn g_squared(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        Ok(self.g_squared_unchecked(t))
    }

    #[inline]
    pub(crate) fn g_squared_unchecked(&self, t: T) -> T {
        match self.kind {
            ProcessKind::Ve => (T::lit(2.0) * t * self.sigma.ln()).exp(),
            ProcessKind::Vp => {
                let (lo, hi) = (self.beta_min(), self.beta_max());
                lo + t * (hi - lo)
            }
        }
    }

    /// `v(t) = ∫₀ᵗ g² = (σ^{2t} − 1)/(2 ln σ)` for VE.
    pub fn variance_increment(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        match self.kind {
            ProcessKind::Ve => Ok(self.ve_variance(t)),
            ProcessKind::Vp => Err(Error::Unsupported {
                op: "variance_increment",
                what: "VP processes (use the marginal transition)".into(),
            }),
        }
    }

    #[inline]
    fn ve_variance(&self, t: T) -> T {
        let two_ln = T::lit(2.0) * self.sigma.ln();
        (two_ln * t).exp_m1() / two_ln
    }

    pub fn marginal(&self, t: T) -> Result<MarginalTransition<T>> {
        Self::check_time(t)?;
        Ok(self.marginal_unchecked(t))
    }

    #[inline]
    pub(crate) fn marginal_unchecked(&self, t: T) -> MarginalTransition<T> {
        match self.kind {
            ProcessKind::Ve => MarginalTransition { mean_scale: T::one(), added_variance: self.ve_variance(t) },
            ProcessKind::Vp => {
                let b = self.integrated_rate(t);
                MarginalTransition {
                    mean_scale: (-T::lit(0.5) * b).exp(),
                    added_variance: -(-b).exp_m1(),
                }
            }
        }
    }

    /// Drift coefficient `f(t)` in `f(x, t) = f(t)·x` (zero for VE).
    #[inline]
    pub(crate) fn drift_coefficient(&self, t: T) -> T {
        match self.kind {
            ProcessKind::Ve => T::zero(),
            ProcessKind::Vp => -T::lit(0.5) * self.g_squared_unchecked(t),
        }
    }

    pub fn drift(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); x.len()];
        self.drift_into(x, t, &mut out)?;
        Ok(out)
    }

    pub fn drift_into(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, out.len())?;
        Self::check_time(t)?;
        let c = self.drift_coefficient(t);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = c * xi;
        }
        Ok(())
    }

    /// `∇·f`: zero for VE, `−(d/2)β(t)` for VP.
    pub fn drift_divergence(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        Ok(self.drift_coefficient(t) * T::from_usize_lossy(self.dim))
    }

    /// `∫ ∇·f dt` over `[a, b]` in closed form.
    pub fn integrated_drift_divergence(&self, a: T, b: T) -> T {
        match self.kind {
            ProcessKind::Ve => T::zero(),
            ProcessKind::Vp => {
                -T::lit(0.5) * T::from_usize_lossy(self.dim) * (self.integrated_rate(b) - self.integrated_rate(a))
            }
        }
    }

    /// Per-coordinate variance of the prior at `t = 1`.
    pub fn prior_variance(&self) -> T {
        match (self.kind, self.prior) {
            (ProcessKind::Ve, PriorVariance::Integrated) => self.ve_variance(T::one()),
            (ProcessKind::Ve, PriorVariance::HalfSquare) => T::lit(0.5) * (self.sigma * self.sigma - T::one()),
            (ProcessKind::Vp, _) => {
                let s2 = self.sigma * self.sigma;
                s2 / (T::one() + s2)
            }
        }
    }

    pub fn prior_log_density(&self, x: &[T]) -> Result<T> {
        check_dim(self.dim, x.len())?;
        Ok(self.prior_log_density_unchecked(x))
    }

    pub(crate) fn prior_log_density_unchecked(&self, x: &[T]) -> T {
        let var = self.prior_variance();
        let d = T::from_usize_lossy(self.dim);
        -T::lit(0.5) * (d * (T::TAU() * var).ln() + norm_sq(x) / var)
    }

    /// Monotone time reparameterisation `ln(noise_to_signal(t))`; evenly spaced
    /// steps in this clock keep `Δt · ‖∂s/∂x‖ g²` roughly constant.
    pub fn log_noise_clock(&self, t: T) -> T {
        self.marginal_unchecked(t).noise_to_signal().ln()
    }

    /// `dt/dλ` for the log-noise clock: `a(t)/g²(t)`.
    pub fn clock_jacobian(&self, t: T) -> T {
        let m = self.marginal_unchecked(t);
        m.added_variance / self.g_squared_unchecked(t)
    }

    /// Inverts [`DiffusionProcess::log_noise_clock`] on `[lo, hi]` by bisection.
    pub fn time_at_log_noise(&self, lambda: f64, lo: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.log_noise_clock(T::lit(mid)).as_f64() < lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ve(sigma: f64) -> DiffusionProcess<f64> {
        DiffusionProcess::ve(sigma, 1).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
        (f(a) + f(b) + inner) * h / 3.0
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * f(a + h * k as f64)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn g_squared_examples() {
        assert_eq!(ve(10.0).g_squared(0.0).unwrap(), 1.0);
        assert!((ve(10.0).g_squared(1.0).unwrap() - 100.0).abs() < 1e-12);
        let vp = DiffusionProcess::vp(10.0, 0.5, 1).unwrap();
        assert!((vp.g_squared(0.0).unwrap() - 0.5 * 101f64.ln()).abs() < 1e-14);
        assert!((vp.g_squared(0.0).unwrap() - 2.307_560_258_420_63).abs() < 1e-9);
        assert!(matches!(ve(10.0).g_squared(1.5), Err(Error::TimeOutOfRange { .. })));
        assert!(ve(10.0).g_squared(-0.1).is_err());
    }

    #[test]
    fn variance_increment_examples_against_quadrature() {
        for &(sigma, expect) in &[(10.0, 99.0 / (2.0 * 10f64.ln())), (25.0, 624.0 / (2.0 * 25f64.ln()))] {
            let p = ve(sigma);
            let v1 = p.variance_increment(1.0).unwrap();
            assert!((v1 - expect).abs() < 1e-12);
            let quad = simpson(|u| sigma.powf(2.0 * u), 0.0, 1.0, 10_000);
            assert!((v1 - quad).abs() < 1e-8, "{v1} vs {quad}");
        }
        assert!((ve(10.0).variance_increment(1.0).unwrap() - 21.497_576_854_210_97).abs() < 1e-12);
        assert!((ve(25.0).variance_increment(1.0).unwrap() - 96.928_249_791_299_44).abs() < 1e-11);
        assert_eq!(ve(10.0).variance_increment(0.0).unwrap(), 0.0);
        let vp = DiffusionProcess::vp(10.0, 0.5, 1).unwrap();
        assert!(matches!(vp.variance_increment(0.5), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn variance_increment_tracks_integrated_rate_on_a_fine_grid() {
        let p = ve(30.0);
        let n = 10_000;
        let mut acc = 0.0;
        let mut prev = p.g_squared(0.0).unwrap();
        for k in 1..=n {
            let t = k as f64 / n as f64;
            let g2 = p.g_squared(t).unwrap();
            acc += 0.5 * (prev + g2) / n as f64;
            prev = g2;
            let v = p.variance_increment(t).unwrap();
            assert!(((v - acc) / v.max(1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn vp_terminal_variance_matches_budget() {
        for &sigma in &[0.5f64, 10.0, 30.0] {
            for &r in &[0.1, 0.5, 0.9] {
                let p = DiffusionProcess::vp(sigma, r, 2).unwrap();
                assert!(((p.beta_min() + p.beta_max()) / 2.0 - p.noise_budget()).abs() < 1e-14);
                let m = p.marginal(1.0).unwrap();
                let s2 = sigma * sigma;
                assert!((m.mean_scale * m.mean_scale - 1.0 / (1.0 + s2)).abs() < 1e-14);
                assert!((m.added_variance - s2 / (1.0 + s2)).abs() < 1e-14);
                let quad = trapezoid(|t| p.g_squared(t).unwrap(), 0.0, 1.0, 16);
                assert!((quad - p.noise_budget()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drift_examples() {
        let x = [1.0, 0.0];
        let p = DiffusionProcess::<f64>::ve(10.0, 2).unwrap();
        assert_eq!(p.drift(&x, 0.3).unwrap(), vec![0.0, 0.0]);
        let vp = DiffusionProcess::vp(10.0, 0.5, 2).unwrap();
        let f = vp.drift(&x, 0.0).unwrap();
        assert!((f[0] + 0.5 * 2.307_560_258_420_63).abs() < 1e-9 && f[1] == 0.0);
        assert_eq!(vp.drift(&[0.0, 0.0], 0.7).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(vp.drift(&[1.0], 0.0), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn drift_divergence_examples() {
        assert_eq!(ve(10.0).drift_divergence(0.4).unwrap(), 0.0);
        let vp2 = DiffusionProcess::<f64>::vp(10.0, 0.5, 2).unwrap();
        assert!((vp2.drift_divergence(0.0).unwrap() + 2.307_560_258_420_63).abs() < 1e-9);
        let vp1 = DiffusionProcess::<f64>::vp(10.0, 0.5, 1).unwrap();
        assert!((vp1.drift_divergence(1.0).unwrap() + 0.5 * vp1.beta_max()).abs() < 1e-14);
    }

    #[test]
    fn prior_log_density_examples() {
        let p = ve(10.0);
        let lp = p.prior_log_density(&[0.0]).unwrap();
        assert!((lp + 0.5 * (std::f64::consts::TAU * 21.497_576_854_210_97).ln()).abs() < 1e-12);
        assert!((lp + 2.452_908_645_368_017).abs() < 1e-12);
        let p2 = DiffusionProcess::ve(10.0, 2).unwrap();
        assert!((p2.prior_log_density(&[0.0, 0.0]).unwrap() - 2.0 * lp).abs() < 1e-12);
        let vp = DiffusionProcess::vp(1e6, 0.5, 1).unwrap();
        let unit = -0.5 * std::f64::consts::TAU.ln();
        assert!((vp.prior_log_density(&[0.0]).unwrap() - unit).abs() < 1e-10);
    }

    #[test]
    fn half_square_prior_is_opt_in() {
        let p = ve(10.0);
        assert!((p.prior_variance() - 21.497_576_854_210_97).abs() < 1e-12);
        let alt = p.with_prior(PriorVariance::HalfSquare);
        assert_eq!(alt.prior_variance(), 49.5);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(DiffusionProcess::<f64>::ve(1.0, 1).is_err());
        assert!(DiffusionProcess::<f64>::ve(10.0, 0).is_err());
        assert!(DiffusionProcess::<f64>::vp(10.0, 1.0, 1).is_err());
        assert!(DiffusionProcess::<f64>::vp(-1.0, 0.5, 1).is_err());
        assert!(DiffusionProcess::<f64>::vp(0.5, 0.5, 1).is_ok());
    }

    #[test]
    fn log_noise_clock_is_monotone() {
        for p in [ve(10.0), DiffusionProcess::vp(10.0, 0.3, 1).unwrap()] {
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=1000 {
                let c = p.log_noise_clock(k as f64 / 1000.0);
                assert!(c > prev);
                prev = c;
            }
        }
    }
}
