//! Thermodynamic lower bounds on diffusion-model likelihood.
//!
//! Exact and learned score fields for VE/VP diffusions, entropy-rate
//! estimators, probability-flow likelihoods and reverse-time samplers.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod divergence;
pub mod entropy;
pub mod error;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod normal;
pub mod process;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod score;
pub mod stats;
pub mod training;

pub use checkpoint::{Checkpoint, TrainableModel};
pub use data::{DataKind, Dataset, DatasetSpec, Gaussian};
pub use divergence::Hutchinson;
pub use entropy::{DemonLedger, EntropyRateSeries, Picture, PlugIn, RateConfig};
pub use error::{Error, Result};
pub use likelihood::{BoundConfig, BoundReport, OdeConfig, SamplingMode, StepSchedule};
pub use model::{Architecture, FeedForwardScore, LinearScore, ModelKind, Trainable};
pub use process::{DiffusionProcess, MarginalTransition, PriorVariance, ProcessKind};
pub use quadrature::{GridSpacing, TimeGrid};
pub use sampler::{Clock, SamplerConfig, TrajectoryEnsemble};
pub use scalar::Real;
pub use score::{PerturbationMode, PerturbationSpec, ScoreField, Variant};
pub use stats::Estimate;
pub use training::{train, LrSchedule, Optimizer, TrainConfig, TrainReport, Trainer};

pub type Process = DiffusionProcess<f64>;
pub type Process32 = DiffusionProcess<f32>;
pub type Field = ScoreField<f64>;
pub type Field32 = ScoreField<f32>;
pub type Grid = TimeGrid<f64>;
pub type Grid32 = TimeGrid<f32>;
