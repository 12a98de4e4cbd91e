//! Score fields `s(x, t)` and their divergences.

mod exact;
mod perturbed;

pub use exact::{gaussian_score, uniform_score, GaussianScore, UniformScore};
pub use perturbed::{NoiseField, PerturbationMode, PerturbationSpec, PerturbedScore};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::divergence::Hutchinson;
use crate::error::{check_dim, Result};
use crate::model::{FeedForwardScore, LinearScore, Trainable};
use crate::process::DiffusionProcess;
use crate::scalar::Real;
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ExactGaussian,
    ExactUniform,
    Linear,
    FeedForward,
    Perturbed,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::ExactGaussian => "exact-gaussian",
            Variant::ExactUniform => "exact-uniform",
            Variant::Linear => "linear",
            Variant::FeedForward => "feed-forward",
            Variant::Perturbed => "perturbed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreField<T> {
    ExactGaussian(GaussianScore<T>),
    ExactUniform(UniformScore<T>),
    Linear(LinearScore<T>),
    FeedForward(FeedForwardScore<T>),
    Perturbed(PerturbedScore<T>),
}

impl<T: Real> ScoreField<T> {
    /// The true score of `data` diffused by `proc`.
    pub fn exact_for(data: &Dataset<T>, proc: &DiffusionProcess<T>) -> Result<Self> {
        check_dim(proc.dim, data.dim())?;
        Ok(match data {
            Dataset::Gaussian(g) => ScoreField::ExactGaussian(GaussianScore::new(*proc, g.clone())?),
            Dataset::Uniform { .. } => ScoreField::ExactUniform(UniformScore::new(*proc)?),
        })
    }

    /// The identically zero field.
    pub fn zero(proc: &DiffusionProcess<T>) -> Self {
        ScoreField::Linear(LinearScore::zeros(*proc, 2).expect("two knots"))
    }

    pub fn perturbed(self, spec: PerturbationSpec, data: &Dataset<T>) -> Result<Self> {
        Ok(ScoreField::Perturbed(PerturbedScore::new(self, spec, data)?))
    }

    pub fn variant(&self) -> Variant {
        match self {
            ScoreField::ExactGaussian(_) => Variant::ExactGaussian,
            ScoreField::ExactUniform(_) => Variant::ExactUniform,
            ScoreField::Linear(_) => Variant::Linear,
            ScoreField::FeedForward(_) => Variant::FeedForward,
            ScoreField::Perturbed(_) => Variant::Perturbed,
        }
    }

    pub fn process(&self) -> &DiffusionProcess<T> {
        match self {
            ScoreField::ExactGaussian(s) => &s.proc,
            ScoreField::ExactUniform(s) => &s.proc,
            ScoreField::Linear(s) => &s.proc,
            ScoreField::FeedForward(s) => &s.proc,
            ScoreField::Perturbed(s) => s.base.process(),
        }
    }

    pub fn dim(&self) -> usize {
        self.process().dim
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ScoreField::ExactGaussian(_) | ScoreField::ExactUniform(_))
    }

    pub fn evaluate(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), out.len())?;
        self.evaluate_unchecked(x, t, out)
    }

    fn evaluate_unchecked(&self, x: &[T], t: T, out: &mut [T]) -> Result<()> {
        match self {
            ScoreField::ExactGaussian(s) => s.evaluate(x, t, out),
            ScoreField::ExactUniform(s) => s.evaluate(x, t, out).map(|_| ()),
            ScoreField::Linear(s) => {
                self.process().marginal(t)?;
                s.forward(x, t, out);
                Ok(())
            }
            ScoreField::FeedForward(s) => {
                self.process().marginal(t)?;
                s.forward(x, t, out);
                Ok(())
            }
            ScoreField::Perturbed(s) => s.evaluate(x, t, out),
        }
    }

    pub fn score(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); x.len()];
        self.evaluate(x, t, &mut out)?;
        Ok(out)
    }

    /// Closed-form divergence, or `None` when only an estimate is available.
    pub fn exact_divergence(&self, x: &[T], t: T) -> Option<Result<T>> {
        match self {
            ScoreField::ExactGaussian(s) => Some(s.divergence(t)),
            ScoreField::ExactUniform(s) => Some(s.divergence(x, t)),
            ScoreField::Linear(s) => Some(self.process().marginal(t).map(|_| s.divergence(t))),
            ScoreField::FeedForward(_) => None,
            ScoreField::Perturbed(s) => s.exact_divergence(x, t),
        }
    }

    pub fn has_exact_divergence(&self) -> bool {
        match self {
            ScoreField::FeedForward(_) => false,
            ScoreField::Perturbed(s) => s.base.has_exact_divergence(),
            _ => true,
        }
    }

    /// `∇·s(x, t)`: exact where possible, otherwise a Hutchinson estimate
    /// whose probes are addressed by `key`.
    pub fn divergence(&self, x: &[T], t: T, hutchinson: &Hutchinson, key: u64) -> Result<Estimate<T>> {
        check_dim(self.dim(), x.len())?;
        if let Some(d) = self.exact_divergence(x, t) {
            return d.map(Estimate::exact);
        }
        self.process().marginal(t)?;
        Ok(hutchinson.estimate(
            |y: &[T], o: &mut [T]| {
                self.evaluate_unchecked(y, t, o).expect("time already validated");
            },
            x,
            key,
        ))
    }
}
