//! Unweighted denoising score matching.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainableModel};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::model::{Architecture, FeedForwardScore, LinearScore, ModelKind, Trainable, DEFAULT_KNOTS};
use crate::process::DiffusionProcess;
use crate::quadrature::{T_MAX, T_MIN};
use crate::rng::{self, domain, fill_normal};
use crate::scalar::{norm_sq, Real};
use crate::score::ScoreField;

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[derive(Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }

    fn state_len(&self, params: usize) -> usize {
        match self {
            Optimizer::Sgd => 0,
            Optimizer::Adam { .. } => 2 * params,
        }
    }
}


/// Learning-rate schedule over `steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `½(1 + cos(π k / steps))` times the base rate.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub hidden_sizes: Vec<usize>,
    pub time_embedding_size: usize,
    pub knots: usize,
    pub steps: usize,
    pub batch: usize,
    /// Defaults to `0.05` for the linear model and `3e-3` for the network.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// Defaults to plain SGD for the linear model and Adam for the network.
    pub optimizer: Option<Optimizer>,
    /// Defaults to constant for the linear model and cosine for the network.
    pub schedule: Option<LrSchedule>,
    /// Record the batch loss every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            model: ModelKind::Linear,
            hidden_sizes: arch.hidden_sizes,
            time_embedding_size: arch.time_embedding_size,
            knots: DEFAULT_KNOTS,
            steps: 2000,
            batch: 256,
            learning_rate: None,
            seed: 0,
            optimizer: None,
            schedule: None,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::InvalidParameter(format!("batch must be at least 2, got {}", self.batch)));
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidParameter("log_every must be positive".into()));
        }
        if self.model == ModelKind::FeedForward {
            self.architecture().validate()?;
        }
        Ok(())
    }

    /// A configuration for `model` with that model's optimiser defaults.
    pub fn for_model(model: ModelKind) -> Self {
        Self { model, ..Self::default() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.model {
            ModelKind::Linear => 0.05,
            ModelKind::FeedForward => 3e-3,
        })
    }

    pub fn optimizer(&self) -> Optimizer {
        self.optimizer.unwrap_or(match self.model {
            ModelKind::Linear => Optimizer::Sgd,
            ModelKind::FeedForward => Optimizer::adam(),
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule.unwrap_or(match self.model {
            ModelKind::Linear => LrSchedule::Constant,
            ModelKind::FeedForward => LrSchedule::Cosine,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden_sizes: self.hidden_sizes.clone(), time_embedding_size: self.time_embedding_size }
    }

    /// The untrained model this configuration starts from.
    pub fn initial_model<T: Real>(&self, proc: &DiffusionProcess<T>) -> Result<TrainableModel<T>> {
        Ok(match self.model {
            ModelKind::Linear => TrainableModel::Linear(LinearScore::zeros(*proc, self.knots)?),
            ModelKind::FeedForward => {
                TrainableModel::FeedForward(FeedForwardScore::init(*proc, self.architecture(), self.seed)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss")?;
        for (s, l) in &self.loss_curve {
            writeln!(w, "{s},{l}")?;
        }
        Ok(())
    }
}

/// One DSM minibatch: rows of `x0` and `noise` are length-`d` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmBatch<T> {
    pub x0: Vec<T>,
    pub t: Vec<T>,
    pub noise: Vec<T>,
}

impl<T: Real> DsmBatch<T> {
    /// Batch number `index` of the stream fixed by `seed`.
    pub fn draw(data: &Dataset<T>, n: usize, seed: u64, index: u64) -> Self {
        let d = data.dim();
        let mut r = rng::stream(rng::derive(seed, domain::DATA, index), 0, 0);
        let mut x0 = vec![T::zero(); n * d];
        let mut t = vec![T::zero(); n];
        let mut noise = vec![T::zero(); n * d];
        for i in 0..n {
            data.sample(&mut r, &mut x0[i * d..(i + 1) * d]);
            t[i] = T::lit(T_MIN + (T_MAX - T_MIN) * r.random::<f64>());
            fill_normal(&mut r, &mut noise[i * d..(i + 1) * d]);
        }
        Self { x0, t, noise }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Noised input `x_t = α x₀ + √a z` and DSM target `−z/√a` for row `i`.
fn noised<T: Real>(proc: &DiffusionProcess<T>, b: &DsmBatch<T>, i: usize, xt: &mut [T], target: &mut [T]) -> Result<T> {
    let d = xt.len();
    let t = b.t[i];
    let m = proc.marginal(t)?;
    let sd = m.added_variance.sqrt();
    for k in 0..d {
        let z = b.noise[i * d + k];
        xt[k] = m.mean_scale * b.x0[i * d + k] + sd * z;
        target[k] = -z / sd;
    }
    Ok(t)
}

fn check_batch<T: Real>(d: usize, b: &DsmBatch<T>) -> Result<()> {
    if b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dim(b.len() * d, b.x0.len())?;
    check_dim(b.len() * d, b.noise.len())
}

/// Batch mean of `‖s(x_t, t) − ∇ log p_t(x_t | x₀)‖²`.
pub fn dsm_loss<T: Real>(field: &ScoreField<T>, batch: &DsmBatch<T>, proc: &DiffusionProcess<T>) -> Result<T> {
    let d = proc.dim;
    check_dim(d, field.dim())?;
    check_batch(d, batch)?;
    let mut xt = vec![T::zero(); d];
    let mut target = vec![T::zero(); d];
    let mut s = vec![T::zero(); d];
    let mut total = T::zero();
    for i in 0..batch.len() {
        let t = noised(proc, batch, i, &mut xt, &mut target)?;
        field.evaluate(&xt, t, &mut s)?;
        for k in 0..d {
            s[k] -= target[k];
        }
        total += norm_sq(&s);
    }
    Ok(total / T::from_usize_lossy(batch.len()))
}

/// Loss and its gradient in the model parameters. Chunks of the batch are
/// reduced in a fixed order, so the result does not depend on thread count.
pub fn dsm_gradient<T: Real, M: Trainable<T> + Sync>(
    model: &M,
    batch: &DsmBatch<T>,
    proc: &DiffusionProcess<T>,
) -> Result<(T, Vec<T>)> {
    let d = proc.dim;
    check_batch(d, batch)?;
    let n = batch.len();
    let np = model.params().len();
    let w = T::one() / T::from_usize_lossy(n);
    let parts: Vec<Result<(T, Vec<T>)>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grad = vec![T::zero(); np];
            let mut loss = T::zero();
            let mut xt = vec![T::zero(); d];
            let mut target = vec![T::zero(); d];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let t = noised(proc, batch, i, &mut xt, &mut target)?;
                loss += model.accumulate_gradient(&xt, t, &target, w, &mut grad);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut grad = vec![T::zero(); np];
    let mut loss = T::zero();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * w, grad))
}

/// Resumable optimisation state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: TrainableModel<T>,
    pub step: usize,
    state: Vec<T>,
    loss_curve: Vec<(usize, f64)>,
    elapsed: Duration,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, proc: &DiffusionProcess<T>) -> Result<Self> {
        config.validate()?;
        proc.validate()?;
        let model = config.initial_model(proc)?;
        let state = vec![T::zero(); config.optimizer().state_len(model.params().len())];
        Ok(Self { config, model, step: 0, state, loss_curve: Vec::new(), elapsed: Duration::ZERO })
    }

    pub fn resume(config: TrainConfig, checkpoint: Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        if checkpoint.model.kind() != config.model {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model but the config asks for {}",
                checkpoint.model.kind(),
                config.model
            )));
        }
        check_dim(config.optimizer().state_len(checkpoint.model.params().len()), checkpoint.optimizer_state.len())
            .map_err(|e| Error::Checkpoint(format!("optimizer state does not match config: {e}")))?;
        Ok(Self {
            config,
            model: checkpoint.model,
            step: checkpoint.step as usize,
            state: checkpoint.optimizer_state,
            loss_curve: Vec::new(),
            elapsed: Duration::ZERO,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { model: self.model.clone(), step: self.step as u64, optimizer_state: self.state.clone() }
    }

    pub fn field(&self) -> ScoreField<T> {
        self.model.to_field()
    }

    fn batch(&self, data: &Dataset<T>, index: usize) -> DsmBatch<T> {
        DsmBatch::draw(data, self.config.batch, self.config.seed, index as u64)
    }

    /// Advances to `until` total steps.
    pub fn run(&mut self, data: &Dataset<T>, until: usize) -> Result<()> {
        check_dim(self.model.process().dim, data.dim())?;
        let start = Instant::now();
        let proc = *self.model.process();
        while self.step < until {
            let lr = T::lit(self.learning_rate(self.step));
            let batch = self.batch(data, self.step);
            let (loss, grad) = dsm_gradient(&self.model, &batch, &proc)?;
            let lf = loss.as_f64();
            if !lf.is_finite() {
                return Err(Error::Diverged { step: self.step, loss: lf });
            }
            if self.step.is_multiple_of(self.config.log_every) {
                self.loss_curve.push((self.step, lf));
            }
            self.apply(&grad, lr);
            self.step += 1;
            if self.model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { step: self.step, loss: f64::NAN });
            }
        }
        self.elapsed += start.elapsed();
        Ok(())
    }

    /// Rate used for update number `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let base = self.config.learning_rate();
        match self.config.schedule() {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = (step as f64 / self.config.steps.max(1) as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn apply(&mut self, grad: &[T], lr: T) {
        match self.config.optimizer() {
            Optimizer::Sgd => {
                for (p, &g) in self.model.params_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let k = (self.step + 1) as i32;
                let c1 = T::one() - b1.powi(k);
                let c2 = T::one() - b2.powi(k);
                let n = grad.len();
                let (m, v) = self.state.split_at_mut(n);
                for (i, p) in self.model.params_mut().iter_mut().enumerate() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + T::lit(eps));
                }
            }
        }
    }

    /// Evaluates the loss on the batch for the current step and closes the report.
    pub fn finish(mut self, data: &Dataset<T>) -> Result<(TrainableModel<T>, TrainReport)> {
        let batch = self.batch(data, self.step);
        let final_loss = dsm_loss(&self.field(), &batch, self.model.process())?.as_f64();
        if !final_loss.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: final_loss });
        }
        if self.loss_curve.last().map(|&(s, _)| s) != Some(self.step) {
            self.loss_curve.push((self.step, final_loss));
        }
        Ok((self.model, TrainReport { loss_curve: self.loss_curve, final_loss, wall_time: self.elapsed }))
    }
}

/// Trains a fresh model for `config.steps` steps.
pub fn train<T: Real>(
    config: &TrainConfig,
    data: &Dataset<T>,
    proc: &DiffusionProcess<T>,
) -> Result<(ScoreField<T>, TrainReport)> {
    let mut tr = Trainer::new(config.clone(), proc)?;
    tr.run(data, config.steps)?;
    let (model, report) = tr.finish(data)?;
    Ok((model.into_field(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn setup(d: usize) -> (DiffusionProcess<f64>, Dataset<f64>) {
        (DiffusionProcess::ve(10.0, d).unwrap(), DatasetSpec::standard_gaussian(d).prepare().unwrap())
    }

    #[test]
    fn zero_field_loss_at_fixed_time() {
        let (p, data) = setup(2);
        let mut b = DsmBatch::draw(&data, 20000, 3, 0);
        b.t.iter_mut().for_each(|t| *t = 0.5);
        let loss = dsm_loss(&ScoreField::zero(&p), &b, &p).unwrap();
        let expect = 2.0 / p.variance_increment(0.5).unwrap();
        assert!((loss / expect - 1.0).abs() < 0.03, "{loss} vs {expect}");
    }

    #[test]
    fn steps_zero_returns_initialisation() {
        let (p, data) = setup(2);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (f, rep) = train(&cfg, &data, &p).unwrap();
        assert_eq!(f, ScoreField::Linear(LinearScore::zeros(p, cfg.knots).unwrap()));
        assert_eq!(rep.loss_curve.len(), 1);
    }

    #[test]
    fn gradient_matches_loss() {
        let (p, data) = setup(2);
        let cfg = TrainConfig { model: ModelKind::FeedForward, hidden_sizes: vec![6], time_embedding_size: 4, ..TrainConfig::default() };
        let mut model = cfg.initial_model(&p).unwrap();
        let mut r = rng::stream(1, 0, 0);
        let mut jitter = vec![0.0; model.params().len()];
        fill_normal(&mut r, &mut jitter);
        model.params_mut().iter_mut().zip(&jitter).for_each(|(a, b)| *a += 0.1 * b);
        let b = DsmBatch::draw(&data, 8, 2, 0);
        let (l, _) = dsm_gradient(&model, &b, &p).unwrap();
        let direct = dsm_loss(&model.to_field(), &b, &p).unwrap();
        assert!((l - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn rejects_bad_config() {
        let p = DiffusionProcess::ve(10.0, 1).unwrap();
        assert!(Trainer::<f64>::new(TrainConfig { batch: 1, ..TrainConfig::default() }, &p).is_err());
        assert!(Trainer::<f64>::new(TrainConfig { learning_rate: Some(0.0), ..TrainConfig::default() }, &p).is_err());
    }
}
