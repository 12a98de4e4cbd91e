//! Euler–Maruyama integration of the reverse-time SDE.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::DiffusionProcess;
use crate::quadrature::{T_MAX, T_MIN};
use crate::rng::{self, domain, fill_normal};
use crate::scalar::Real;
use crate::score::ScoreField;

/// Which time coordinate an ensemble's `times` are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// Forward process time `t`, decreasing along a reverse trajectory.
    T,
    /// Controlled-forward time `τ = 1 − t`, increasing.
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// Keep every `record_every`-th state (plus the first and last).
    pub record_every: usize,
    /// Skip the noise injection on the final step.
    pub denoise_last: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 512, t_min: T_MIN, t_max: T_MAX, record_every: 1, denoise_last: false }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("sampler needs at least one step".into()));
        }
        if self.record_every == 0 || !self.steps.is_multiple_of(self.record_every) {
            return Err(Error::InvalidParameter(format!(
                "record_every ({}) must divide steps ({})",
                self.record_every, self.steps
            )));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::InvalidParameter(format!("invalid time range [{}, {}]", self.t_min, self.t_max)));
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        (self.t_max - self.t_min) / self.steps as f64
    }

    /// Forward time after `k` reverse steps.
    pub fn time_at(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_min
        } else {
            self.t_max - k as f64 * self.dt()
        }
    }
}

/// States of `n` paths at recorded steps, laid out path-major:
/// `states[(path * times.len() + step) * dim + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble<T> {
    pub clock: Clock,
    pub times: Vec<T>,
    pub dim: usize,
    pub paths: usize,
    pub seed: u64,
    pub states: Vec<T>,
}

impl<T: Real> TrajectoryEnsemble<T> {
    pub fn state(&self, path: usize, step: usize) -> &[T] {
        let o = (path * self.times.len() + step) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn terminal(&self, path: usize) -> &[T] {
        self.state(path, self.times.len() - 1)
    }

    /// All paths at one recorded step, flattened.
    pub fn slice_at(&self, step: usize) -> Vec<T> {
        (0..self.paths).flat_map(|p| self.state(p, step).iter().copied()).collect()
    }

    /// The forward time `t` of each recorded step.
    pub fn forward_times(&self) -> Vec<T> {
        match self.clock {
            Clock::T => self.times.clone(),
            Clock::Tau => self.times.iter().map(|&tau| T::one() - tau).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let clock = match self.clock {
            Clock::T => "t",
            Clock::Tau => "tau",
        };
        write!(w, "path,step,{clock}")?;
        for i in 0..self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for p in 0..self.paths {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{p},{k},{t}")?;
                for v in self.state(p, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Compact binary form: magic `DTSE`, clock `u8`, dim, paths and
    /// step count as `u64`, seed `u64`, then times and states as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"DTSE")?;
        w.write_all(&[matches!(self.clock, Clock::Tau) as u8])?;
        for v in [self.dim as u64, self.paths as u64, self.times.len() as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.times.iter().chain(&self.states) {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::Checkpoint(format!("trajectory file: {m}"));
        if buf.len() < 37 || &buf[..4] != b"DTSE" {
            return Err(bad("bad magic bytes"));
        }
        let clock = match buf[4] {
            0 => Clock::T,
            1 => Clock::Tau,
            _ => return Err(bad("unknown clock")),
        };
        let u = |i: usize| u64::from_le_bytes(buf[5 + 8 * i..13 + 8 * i].try_into().expect("8 bytes"));
        let (dim, paths, steps, seed) = (u(0) as usize, u(1) as usize, u(2) as usize, u(3));
        let count = steps
            .checked_mul(paths)
            .and_then(|v| v.checked_mul(dim))
            .and_then(|v| v.checked_add(steps))
            .ok_or_else(|| bad("size overflow"))?;
        let body = &buf[37..];
        if body.len() != count.checked_mul(8).ok_or_else(|| bad("size overflow"))? {
            return Err(bad("length does not match header"));
        }
        let vals: Vec<T> = body
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let (times, states) = vals.split_at(steps);
        Ok(Self { clock, times: times.to_vec(), dim, paths, seed, states: states.to_vec() })
    }
}

/// Draws path `p`'s initial state from the prior.
fn prior_draw<T: Real>(proc: &DiffusionProcess<T>, seed: u64, p: usize, x: &mut [T]) {
    let mut r = rng::stream(rng::derive(seed, domain::PRIOR, 0), p as u64, 0);
    fill_normal(&mut r, x);
    let sd = proc.prior_variance().sqrt();
    x.iter_mut().for_each(|v| *v *= sd);
}

fn integrate<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
    clock: Clock,
) -> Result<TrajectoryEnsemble<T>> {
    cfg.validate()?;
    if field.process() != proc {
        return Err(Error::ProcessMismatch);
    }
    let d = proc.dim;
    let recorded: Vec<usize> = (0..=cfg.steps).step_by(cfg.record_every).collect();
    let times: Vec<T> = recorded
        .iter()
        .map(|&k| {
            let t = cfg.time_at(k);
            T::lit(match clock {
                Clock::T => t,
                Clock::Tau => 1.0 - t,
            })
        })
        .collect();
    let dt = T::lit(cfg.dt());
    let noise_seed = rng::derive(seed, domain::NOISE, 0);
    let paths: Vec<Result<Vec<T>>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(recorded.len() * d);
            let mut x = vec![T::zero(); d];
            prior_draw(proc, seed, p, &mut x);
            out.extend_from_slice(&x);
            let mut s = vec![T::zero(); d];
            let mut z = vec![T::zero(); d];
            for k in 0..cfg.steps {
                let t = T::lit(cfg.time_at(k));
                field.evaluate(&x, t, &mut s)?;
                let g2 = proc.g_squared(t)?;
                let c = proc.drift_coefficient(t);
                let last = k + 1 == cfg.steps;
                if !(last && cfg.denoise_last) {
                    fill_normal(&mut rng::stream(noise_seed, p as u64, k as u64), &mut z);
                } else {
                    z.iter_mut().for_each(|v| *v = T::zero());
                }
                let gs = (g2 * dt).sqrt();
                for i in 0..d {
                    let xi = x[i];
                    x[i] = xi + (-c * xi + g2 * s[i]) * dt + gs * z[i];
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { index: p, t: cfg.time_at(k + 1) });
                }
                if (k + 1) % cfg.record_every == 0 {
                    out.extend_from_slice(&x);
                }
            }
            Ok(out)
        })
        .collect();
    let mut states = Vec::with_capacity(n * recorded.len() * d);
    for p in paths {
        states.extend(p?);
    }
    Ok(TrajectoryEnsemble { clock, times, dim: d, paths: n, seed, states })
}

/// Reverse-time samples `x_{t−Δt} = x_t + [−f + g² s]Δt + g√Δt z`, from the
/// prior at `t_max` down to `t_min`, indexed by `t`.
pub fn reverse_sample<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<TrajectoryEnsemble<T>> {
    integrate(proc, field, n, cfg, seed, Clock::T)
}

/// The same recursion indexed by `τ = 1 − t`.
pub fn controlled_forward_ensemble<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<TrajectoryEnsemble<T>> {
    integrate(proc, field, n, cfg, seed, Clock::Tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::stats::Moments;

    fn gaussian_field(d: usize) -> (DiffusionProcess<f64>, ScoreField<f64>) {
        let p = DiffusionProcess::ve(10.0, d).unwrap();
        let data = DatasetSpec::standard_gaussian(d).prepare().unwrap();
        (p, ScoreField::exact_for(&data, &p).unwrap())
    }

    #[test]
    fn empty_ensemble() {
        let (p, f) = gaussian_field(1);
        let e = reverse_sample(&p, &f, 0, &SamplerConfig::with_steps(8), 1).unwrap();
        assert_eq!(e.paths, 0);
        assert!(e.states.is_empty());
        assert_eq!(e.times.len(), 9);
    }

    #[test]
    fn both_clocks_share_states() {
        let (p, f) = gaussian_field(2);
        let cfg = SamplerConfig::with_steps(16);
        let a = reverse_sample(&p, &f, 5, &cfg, 3).unwrap();
        let b = controlled_forward_ensemble(&p, &f, 5, &cfg, 3).unwrap();
        assert_eq!(a.states, b.states);
        assert!(b.times.windows(2).all(|w| w[0] < w[1]));
        assert!(a.times.windows(2).all(|w| w[0] > w[1]));
        for (x, y) in a.times.iter().zip(b.forward_times()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn path_noise_is_order_independent() {
        let (p, f) = gaussian_field(1);
        let cfg = SamplerConfig::with_steps(8);
        let a = reverse_sample(&p, &f, 10, &cfg, 3).unwrap();
        let b = reverse_sample(&p, &f, 4, &cfg, 3).unwrap();
        assert_eq!(&a.states[..b.states.len()], &b.states[..]);
    }

    #[test]
    fn zero_field_keeps_prior_spread() {
        let p = DiffusionProcess::ve(10.0, 1).unwrap();
        let f = ScoreField::zero(&p);
        let e = reverse_sample(&p, &f, 2000, &SamplerConfig::with_steps(64), 5).unwrap();
        let m = Moments::from_slice(&(0..e.paths).map(|i| e.terminal(i)[0]).collect::<Vec<_>>());
        assert!(m.variance() > 0.9 * p.prior_variance());
    }

    #[test]
    fn record_every_subsamples() {
        let (p, f) = gaussian_field(1);
        let full = reverse_sample(&p, &f, 3, &SamplerConfig::with_steps(8), 1).unwrap();
        let sub = reverse_sample(&p, &f, 3, &SamplerConfig { record_every: 4, ..SamplerConfig::with_steps(8) }, 1).unwrap();
        assert_eq!(sub.times.len(), 3);
        for path in 0..3 {
            assert_eq!(sub.state(path, 1), full.state(path, 4));
            assert_eq!(sub.terminal(path), full.terminal(path));
        }
        assert!(SamplerConfig { record_every: 3, ..SamplerConfig::with_steps(8) }.validate().is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let (p, f) = gaussian_field(2);
        let e = controlled_forward_ensemble(&p, &f, 3, &SamplerConfig::with_steps(4), 9).unwrap();
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        assert_eq!(TrajectoryEnsemble::<f64>::read_binary(&buf[..]).unwrap(), e);
        buf[0] = b'Q';
        assert!(TrajectoryEnsemble::<f64>::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (p, f) = gaussian_field(1);
        let e = reverse_sample(&p, &f, 2, &SamplerConfig::with_steps(2), 0).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("path,step,t,x0"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }
}
