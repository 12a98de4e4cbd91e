//! Controlled corruptions of a base score field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScoreField;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, domain, fill_normal};
use crate::scalar::{dot, norm_sq, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    #[default]
    AdditiveNoiseField,
    ScalarMiscalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub mode: PerturbationMode,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn additive(epsilon: f64, seed: u64) -> Self {
        Self { epsilon, mode: PerturbationMode::AdditiveNoiseField, seed }
    }

    pub fn miscalibration(epsilon: f64) -> Self {
        Self { epsilon, mode: PerturbationMode::ScalarMiscalibration, seed: 0 }
    }

    /// Noise amplitudes must be non-negative; a miscalibration factor
    /// `1 + ε` must stay positive.
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon.is_finite()
            && match self.mode {
                PerturbationMode::AdditiveNoiseField => self.epsilon >= 0.0,
                PerturbationMode::ScalarMiscalibration => self.epsilon > -1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("epsilon {} is out of range for {:?}", self.epsilon, self.mode)))
        }
    }
}

const FEATURES: usize = 16;
const TIME_MODES: usize = 3;
const CALIBRATION_SAMPLES: usize = 2048;
const CALIBRATION_TIME: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
struct Feature<T> {
    freq: Vec<T>,
    amp: Vec<T>,
    time_freq: T,
    phase: T,
}

#[derive(Debug, Clone, PartialEq)]
struct TimeMode<T> {
    dir: Vec<T>,
    freq: T,
    phase: T,
}

/// Smooth, bounded, divergence-free vector field `η(x, t)` fixed by a seed.
///
/// Spatial part: random Fourier features `a_j cos(w_j·x/ℓ + ν_j t + b_j)` with
/// `a_j ⊥ w_j`. Temporal part: `Σ_m u_m cos(mπt + ψ_m)`, constant in `x`.
/// In one dimension only the temporal part is non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField<T> {
    dim: usize,
    length: T,
    gain: T,
    features: Vec<Feature<T>>,
    modes: Vec<TimeMode<T>>,
}

impl<T: Real> NoiseField<T> {
    /// Draws an un-normalised field (`gain = 1`).
    pub fn draw(dim: usize, length: T, seed: u64) -> Self {
        let mut rng = rng::stream(rng::derive(seed, domain::PERTURB, 0), 0, 0);
        let mut features = Vec::new();
        if dim >= 2 {
            for _ in 0..FEATURES {
                let mut freq = vec![T::zero(); dim];
                let mut amp = vec![T::zero(); dim];
                fill_normal(&mut rng, &mut freq);
                fill_normal(&mut rng, &mut amp);
                let proj = dot(&amp, &freq) / norm_sq(&freq);
                for (a, &w) in amp.iter_mut().zip(&freq) {
                    *a -= proj * w;
                }
                let time_freq = T::lit(rng.random_range(-1.0..1.0) * std::f64::consts::PI);
                let phase = T::lit(rng.random_range(0.0..std::f64::consts::TAU));
                features.push(Feature { freq, amp, time_freq, phase });
            }
        }
        let mut modes = Vec::new();
        for m in 1..=TIME_MODES {
            let mut dir = vec![T::zero(); dim];
            fill_normal(&mut rng, &mut dir);
            let phase = T::lit(rng.random_range(0.0..std::f64::consts::TAU));
            modes.push(TimeMode { dir, freq: T::PI() * T::from_usize_lossy(m), phase });
        }
        Self { dim, length, gain: T::one(), features, modes }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gain(&self) -> T {
        self.gain
    }

    pub fn evaluate(&self, x: &[T], t: T, out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        let spatial = T::one() / T::from_usize_lossy(FEATURES).sqrt();
        for f in &self.features {
            let c = (dot(&f.freq, x) / self.length + f.time_freq * t + f.phase).cos() * spatial;
            for (o, &a) in out.iter_mut().zip(&f.amp) {
                *o += c * a;
            }
        }
        let temporal = T::one() / T::from_usize_lossy(TIME_MODES).sqrt();
        for m in &self.modes {
            let c = (m.freq * t + m.phase).cos() * temporal;
            for (o, &u) in out.iter_mut().zip(&m.dir) {
                *o += c * u;
            }
        }
        for o in out.iter_mut() {
            *o *= self.gain;
        }
    }
}

/// `base + ε η` or `(1 + ε) base`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedScore<T> {
    pub base: Box<ScoreField<T>>,
    pub spec: PerturbationSpec,
    noise: Option<NoiseField<T>>,
}

impl<T: Real> PerturbedScore<T> {
    /// Builds the wrapper. For the additive mode the noise field is scaled so
    /// that `E‖η‖² = E‖s_base‖²` under `p_t` at `t = 0.5`, with `data` giving `p₀`.
    pub fn new(base: ScoreField<T>, spec: PerturbationSpec, data: &Dataset<T>) -> Result<Self> {
        spec.validate()?;
        let noise = match spec.mode {
            PerturbationMode::ScalarMiscalibration => None,
            PerturbationMode::AdditiveNoiseField => Some(calibrated_noise(&base, spec.seed, data)?),
        };
        Ok(Self { base: Box::new(base), spec, noise })
    }

    pub fn noise(&self) -> Option<&NoiseField<T>> {
        self.noise.as_ref()
    }

    pub fn epsilon(&self) -> T {
        T::lit(self.spec.epsilon)
    }

    pub fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        self.base.evaluate(x, t, out)?;
        if self.spec.epsilon == 0.0 {
            return Ok(());
        }
        let eps = self.epsilon();
        match &self.noise {
            None => out.iter_mut().for_each(|o| *o *= T::one() + eps),
            Some(n) => {
                let mut eta = vec![T::zero(); out.len()];
                n.evaluate(x, t, &mut eta);
                for (o, e) in out.iter_mut().zip(eta) {
                    *o += eps * e;
                }
            }
        }
        Ok(())
    }

    /// Exact divergence when the base has one; `η` contributes nothing.
    pub fn exact_divergence(&self, x: &[T], t: T) -> Option<Result<T>> {
        let base = self.base.exact_divergence(x, t)?;
        Some(base.map(|d| match self.spec.mode {
            PerturbationMode::ScalarMiscalibration if self.spec.epsilon != 0.0 => d * (T::one() + self.epsilon()),
            _ => d,
        }))
    }
}

fn calibrated_noise<T: Real>(base: &ScoreField<T>, seed: u64, data: &Dataset<T>) -> Result<NoiseField<T>> {
    let proc = base.process();
    let t = T::lit(CALIBRATION_TIME);
    let m = proc.marginal(t)?;
    let length = (m.mean_scale * m.mean_scale * data.mean_variance() + m.added_variance).sqrt();
    let mut field = NoiseField::draw(proc.dim, length, seed);
    let d = proc.dim;
    let mut x = vec![T::zero(); d];
    let mut s = vec![T::zero(); d];
    let mut eta = vec![T::zero(); d];
    let (mut base_sq, mut noise_sq) = (0.0, 0.0);
    let mut rng = rng::stream(rng::derive(seed, domain::PERTURB, 1), 0, 0);
    for _ in 0..CALIBRATION_SAMPLES {
        data.sample_marginal(m, &mut rng, &mut x);
        base.evaluate(&x, t, &mut s)?;
        field.evaluate(&x, t, &mut eta);
        base_sq += norm_sq(&s).as_f64();
        noise_sq += norm_sq(&eta).as_f64();
    }
    if noise_sq > 0.0 && base_sq > 0.0 {
        field.gain = T::lit((base_sq / noise_sq).sqrt());
    }
    Ok(field)
}
