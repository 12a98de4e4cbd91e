//! Hutchinson trace estimator with finite-difference Jacobian-vector products.

use serde::{Deserialize, Serialize};

use crate::rng::{self, domain, fill_rademacher};
use crate::scalar::Real;
use crate::stats::{Estimate, Moments};

/// Configuration of the stochastic divergence estimator.
///
/// Probe vectors are addressed by `(seed, key, probe)`, so the same `key`
/// always sees the same probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hutchinson {
    pub probes: usize,
    /// Central-difference step relative to `max(1, ‖x‖_∞)`.
    pub rel_step: f64,
    pub seed: u64,
}

impl Default for Hutchinson {
    fn default() -> Self {
        Self { probes: 8, rel_step: 1e-4, seed: 0 }
    }
}

impl Hutchinson {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Estimates `∇·F(x) = tr(∂F/∂x)` as the probe mean of `vᵀ (∂F/∂x) v`.
    pub fn estimate<T: Real>(&self, f: impl Fn(&[T], &mut [T]), x: &[T], key: u64) -> Estimate<T> {
        let d = x.len();
        let scale = x.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let h = T::lit(self.rel_step) * scale;
        let mut v = vec![T::zero(); d];
        let mut xp = vec![T::zero(); d];
        let mut xm = vec![T::zero(); d];
        let mut fp = vec![T::zero(); d];
        let mut fm = vec![T::zero(); d];
        let mut acc = Moments::new();
        let stream_seed = rng::derive(self.seed, domain::PROBE, key);
        for p in 0..self.probes.max(1) {
            fill_rademacher(&mut rng::stream(stream_seed, p as u64, 0), &mut v);
            for i in 0..d {
                xp[i] = x[i] + h * v[i];
                xm[i] = x[i] - h * v[i];
            }
            f(&xp, &mut fp);
            f(&xm, &mut fm);
            let mut q = T::zero();
            for i in 0..d {
                q += v[i] * (fp[i] - fm[i]);
            }
            acc.push(q / (T::lit(2.0) * h));
        }
        acc.estimate()
    }
}

/// Trace from `d` central-difference columns; a deterministic reference.
pub fn finite_difference_trace<T: Real>(f: impl Fn(&[T], &mut [T]), x: &[T], h: T) -> T {
    let d = x.len();
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    let mut fp = vec![T::zero(); d];
    let mut fm = vec![T::zero(); d];
    let mut tr = T::zero();
    for i in 0..d {
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        f(&xp, &mut fp);
        f(&xm, &mut fm);
        tr += (fp[i] - fm[i]) / (T::lit(2.0) * h);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    tr
}
