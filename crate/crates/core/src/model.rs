//! Trainable score models with analytic parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::process::DiffusionProcess;
use crate::quadrature::{T_MAX, T_MIN};
use crate::rng::{self, domain, fill_normal};
use crate::scalar::Real;

pub const DEFAULT_KNOTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    FeedForward,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::FeedForward => "feed-forward",
        })
    }
}

/// A score model whose output is differentiable in a flat parameter vector.
pub trait Trainable<T: Real> {
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];

    /// Evaluates `s(x, t)` into `out`.
    fn forward(&self, x: &[T], t: T, out: &mut [T]);

    /// Adds `weight · ∂‖s(x,t) − target‖²/∂θ` to `grad` and returns `‖s − target‖²`.
    fn accumulate_gradient(&self, x: &[T], t: T, target: &[T], weight: T, grad: &mut [T]) -> T;
}

/// `s(x, t) = W(t) x + b(t)` with `(W, b)` interpolated linearly between knots
/// evenly spaced in the log noise-to-signal clock over the clipped range.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScore<T> {
    pub proc: DiffusionProcess<T>,
    pub knots: usize,
    coeffs: Vec<T>,
}

impl<T: Real> LinearScore<T> {
    /// All-zero coefficients: the zero field.
    pub fn zeros(proc: DiffusionProcess<T>, knots: usize) -> Result<Self> {
        if knots < 2 {
            return Err(Error::InvalidParameter("linear model needs at least two knots".into()));
        }
        let d = proc.dim;
        Ok(Self { proc, knots, coeffs: vec![T::zero(); knots * (d * d + d)] })
    }

    pub fn from_params(proc: DiffusionProcess<T>, knots: usize, coeffs: Vec<T>) -> Result<Self> {
        let mut m = Self::zeros(proc, knots)?;
        check_dim(m.coeffs.len(), coeffs.len())?;
        m.coeffs = coeffs;
        Ok(m)
    }

    fn stride(&self) -> usize {
        self.proc.dim * self.proc.dim + self.proc.dim
    }

    /// Knot index and interpolation weight of the upper knot.
    fn locate(&self, t: T) -> (usize, T) {
        let span = T::from_usize_lossy(self.knots - 1);
        let (l0, l1) = self.clock_range();
        let t = t.max(T::lit(T_MIN)).min(T::lit(T_MAX));
        let u = ((self.proc.log_noise_clock(t) - l0) / (l1 - l0)).max(T::zero()).min(T::one()) * span;
        let k = u.floor().to_usize().unwrap_or(0).min(self.knots - 2);
        (k, u - T::from_usize_lossy(k))
    }

    /// Mutable view of knot `k` as `(W row-major, b)`.
    pub fn knot_mut(&mut self, k: usize) -> (&mut [T], &mut [T]) {
        let d = self.proc.dim;
        let s = self.stride();
        let block = &mut self.coeffs[k * s..(k + 1) * s];
        block.split_at_mut(d * d)
    }

    fn clock_range(&self) -> (T, T) {
        (self.proc.log_noise_clock(T::lit(T_MIN)), self.proc.log_noise_clock(T::lit(T_MAX)))
    }

    pub fn knot_time(&self, k: usize) -> T {
        let (l0, l1) = self.clock_range();
        let frac = k as f64 / (self.knots - 1) as f64;
        let lam = l0.as_f64() + (l1 - l0).as_f64() * frac;
        match k {
            0 => T::lit(T_MIN),
            k if k + 1 == self.knots => T::lit(T_MAX),
            _ => T::lit(self.proc.time_at_log_noise(lam, T_MIN, T_MAX)),
        }
    }

    /// `tr W(t)`.
    pub fn divergence(&self, t: T) -> T {
        let d = self.proc.dim;
        let s = self.stride();
        let (k, lam) = self.locate(t);
        let (lo, hi) = (&self.coeffs[k * s..], &self.coeffs[(k + 1) * s..]);
        (0..d).map(|i| (T::one() - lam) * lo[i * d + i] + lam * hi[i * d + i]).sum()
    }
}

impl<T: Real> Trainable<T> for LinearScore<T> {
    fn params(&self) -> &[T] {
        &self.coeffs
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.coeffs
    }

    fn forward(&self, x: &[T], t: T, out: &mut [T]) {
        let d = self.proc.dim;
        let s = self.stride();
        let (k, lam) = self.locate(t);
        let (lo, hi) = (&self.coeffs[k * s..(k + 1) * s], &self.coeffs[(k + 1) * s..(k + 2) * s]);
        let w = |i: usize| (T::one() - lam) * lo[i] + lam * hi[i];
        for i in 0..d {
            let mut acc = w(d * d + i);
            for j in 0..d {
                acc += w(i * d + j) * x[j];
            }
            out[i] = acc;
        }
    }

    fn accumulate_gradient(&self, x: &[T], t: T, target: &[T], weight: T, grad: &mut [T]) -> T {
        let d = self.proc.dim;
        let s = self.stride();
        let mut out = vec![T::zero(); d];
        self.forward(x, t, &mut out);
        let (k, lam) = self.locate(t);
        let mut loss = T::zero();
        for i in 0..d {
            let r = out[i] - target[i];
            loss += r * r;
            let g = T::lit(2.0) * weight * r;
            for (base, c) in [(k * s, T::one() - lam), ((k + 1) * s, lam)] {
                let gc = g * c;
                for j in 0..d {
                    grad[base + i * d + j] += gc * x[j];
                }
                grad[base + d * d + i] += gc;
            }
        }
        loss
    }
}

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_sizes: Vec<usize>,
    pub time_embedding_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden_sizes: vec![64, 64], time_embedding_size: 16 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidParameter("hidden sizes must be a non-empty list of positive integers".into()));
        }
        if self.time_embedding_size < 2 || !self.time_embedding_size.is_multiple_of(2) {
            return Err(Error::InvalidParameter("time embedding size must be even and at least 2".into()));
        }
        Ok(())
    }

    fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        let mut v = vec![dim + self.time_embedding_size];
        v.extend(&self.hidden_sizes);
        v.push(dim);
        v
    }

    fn param_count(&self, dim: usize) -> usize {
        self.layer_sizes(dim).windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Position of `t` on the log noise-to-signal clock, `0` at `T_MIN` and `1` at `T_MAX`.
fn clock_position<T: Real>(proc: &DiffusionProcess<T>, t: T) -> T {
    let (l0, l1) = (proc.log_noise_clock(T::lit(T_MIN)), proc.log_noise_clock(T::lit(T_MAX)));
    (proc.log_noise_clock(t.max(T::lit(T_MIN)).min(T::lit(T_MAX))) - l0) / (l1 - l0)
}

/// `tanh` multilayer perceptron on `[c_in(t)·x, emb(u(t))]`, where `u` is the
/// normalised log-noise clock. With `c = 1/√(α(t)² + a(t))`, the marginal
/// scale of unit-variance data, `s(x, t) = c·net(c·x, u) − c²·x`: the network
/// learns the residual from the standard-normal score.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardScore<T> {
    pub proc: DiffusionProcess<T>,
    pub arch: Architecture,
    sizes: Vec<usize>,
    params: Vec<T>,
}

struct Scales<T> {
    c_in: T,
    c_out: T,
    c_skip: T,
}

impl<T: Real> FeedForwardScore<T> {
    /// Hidden layers get `N(0, 1/fan_in)` weights; the output layer starts at
    /// zero so the initial field is the standard-normal score.
    pub fn init(proc: DiffusionProcess<T>, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let sizes = arch.layer_sizes(proc.dim);
        let mut params = vec![T::zero(); arch.param_count(proc.dim)];
        let mut rng = rng::stream(rng::derive(seed, domain::INIT, 0), 0, 0);
        let mut off = 0;
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let block = &mut params[off..off + fan_in * fan_out];
            if l + 1 < layers {
                fill_normal(&mut rng, block);
                let s = T::one() / T::from_usize_lossy(fan_in).sqrt();
                block.iter_mut().for_each(|v| *v *= s);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self { proc, arch, sizes, params })
    }

    pub fn from_params(proc: DiffusionProcess<T>, arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let sizes = arch.layer_sizes(proc.dim);
        check_dim(arch.param_count(proc.dim), params.len())?;
        Ok(Self { proc, arch, sizes, params })
    }

    fn scales(&self, t: T) -> Scales<T> {
        let m = self.proc.marginal_unchecked(t);
        let c = T::one() / (m.mean_scale * m.mean_scale + m.added_variance).sqrt();
        Scales { c_in: c, c_out: c, c_skip: c * c }
    }

    fn input(&self, x: &[T], t: T, c_in: T) -> Vec<T> {
        let half = self.arch.time_embedding_size / 2;
        let mut v: Vec<T> = x.iter().map(|&xi| xi * c_in).collect();
        let u = clock_position(&self.proc, t);
        for k in 0..half {
            let e = if half > 1 { T::from_usize_lossy(k) / T::from_usize_lossy(half - 1) } else { T::zero() };
            let w = T::PI() * T::lit(16.0).powf(e);
            v.push((w * u).sin());
            v.push((w * u).cos());
        }
        v
    }

    /// Activations of every layer (input, hidden..., raw output).
    fn activations(&self, x: &[T], t: T, c_in: T) -> Vec<Vec<T>> {
        let mut acts = vec![self.input(x, t, c_in)];
        let mut off = 0;
        let layers = self.sizes.len() - 1;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let prev = &acts[l];
            let mut z: Vec<T> = (0..n_out)
                .map(|i| w[i * n_in..(i + 1) * n_in].iter().zip(prev).fold(b[i], |acc, (&wi, &p)| acc + wi * p))
                .collect();
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
            off += n_in * n_out + n_out;
        }
        acts
    }
}

impl<T: Real> Trainable<T> for FeedForwardScore<T> {
    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn forward(&self, x: &[T], t: T, out: &mut [T]) {
        let sc = self.scales(t);
        let width = self.sizes.iter().copied().max().unwrap_or(0);
        let mut cur = self.input(x, t, sc.c_in);
        cur.resize(width, T::zero());
        let mut next = vec![T::zero(); width];
        let layers = self.sizes.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let mut z = b[i];
                for j in 0..n_in {
                    z += row[j] * cur[j];
                }
                next[i] = if l + 1 < layers { z.tanh() } else { z };
            }
            std::mem::swap(&mut cur, &mut next);
            off += n_in * n_out + n_out;
        }
        for ((o, &y), &xi) in out.iter_mut().zip(&cur).zip(x) {
            *o = sc.c_out * y - sc.c_skip * xi;
        }
    }

    fn accumulate_gradient(&self, x: &[T], t: T, target: &[T], weight: T, grad: &mut [T]) -> T {
        let sc = self.scales(t);
        let acts = self.activations(x, t, sc.c_in);
        let layers = self.sizes.len() - 1;
        let mut loss = T::zero();
        let mut delta: Vec<T> = acts[layers]
            .iter()
            .zip(target)
            .zip(x)
            .map(|((&y, &tg), &xi)| {
                let r = sc.c_out * y - sc.c_skip * xi - tg;
                loss += r * r;
                T::lit(2.0) * weight * r * sc.c_out
            })
            .collect();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for i in 0..n_out {
                let g = delta[i];
                for j in 0..n_in {
                    grad[off + i * n_in + j] += g * prev[j];
                }
                grad[off + n_in * n_out + i] += g;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            delta = (0..n_in)
                .map(|j| {
                    let back: T = (0..n_out).map(|i| w[i * n_in + j] * delta[i]).sum();
                    let h = prev[j];
                    back * (T::one() - h * h)
                })
                .collect();
        }
        loss
    }
}
