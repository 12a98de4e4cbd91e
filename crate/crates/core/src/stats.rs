//! Monte-Carlo summaries and rank statistics.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Estimate<T> {
    pub value: T,
    pub stderr: T,
}

impl<T: Real> Estimate<T> {
    pub fn new(value: T, stderr: T) -> Self {
        Self { value, stderr }
    }

    pub fn exact(value: T) -> Self {
        Self { value, stderr: T::zero() }
    }

    /// Sample mean and standard error of the mean.
    ///
    /// A single sample has zero standard error.
    pub fn from_samples(xs: &[T]) -> Option<Self> {
        let m = Moments::from_slice(xs);
        (m.count > 0).then(|| m.estimate())
    }

    pub fn scale(self, c: T) -> Self {
        Self { value: self.value * c, stderr: self.stderr * c.abs() }
    }

    pub fn shift(self, c: T) -> Self {
        Self { value: self.value + c, stderr: self.stderr }
    }

    /// Sum of two independent estimates.
    pub fn add_independent(self, other: Self) -> Self {
        Self {
            value: self.value + other.value,
            stderr: combined(self.stderr, other.stderr),
        }
    }

    /// Difference of two independent estimates.
    pub fn sub_independent(self, other: Self) -> Self {
        Self {
            value: self.value - other.value,
            stderr: combined(self.stderr, other.stderr),
        }
    }

    /// How many standard errors `self.value` sits from `target`.
    pub fn z_score(&self, target: T) -> T {
        if self.stderr > T::zero() {
            (self.value - target) / self.stderr
        } else if self.value == target {
            T::zero()
        } else {
            T::infinity() * (self.value - target).signum()
        }
    }
}

pub fn combined<T: Real>(a: T, b: T) -> T {
    (a * a + b * b).sqrt()
}

/// Streaming mean/variance (Welford). Summation order is the insertion order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments<T> {
    pub count: usize,
    mean: T,
    m2: T,
}

impl<T: Real> Moments<T> {
    pub fn new() -> Self {
        Self { count: 0, mean: T::zero(), m2: T::zero() }
    }

    pub fn from_slice(xs: &[T]) -> Self {
        let mut m = Self::new();
        for &x in xs {
            m.push(x);
        }
        m
    }

    #[inline]
    pub fn push(&mut self, x: T) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / T::from_usize_lossy(self.count);
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> T {
        if self.count < 2 {
            T::zero()
        } else {
            self.m2 / T::from_usize_lossy(self.count - 1)
        }
    }

    pub fn estimate(&self) -> Estimate<T> {
        let se = if self.count == 0 {
            T::zero()
        } else {
            (self.variance() / T::from_usize_lossy(self.count)).sqrt()
        };
        Estimate::new(self.mean, se)
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() {
        return None;
    }
    pearson(&ranks(xs), &ranks(ys))
}
