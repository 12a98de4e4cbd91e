//! Probability-flow likelihood, entropy endpoints and the entropy-rate bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataKind, Dataset};
use crate::divergence::Hutchinson;
use crate::error::{check_dim, Error, Result};
use crate::process::{DiffusionProcess, ProcessKind};
use crate::quadrature::{GridSpacing, TimeGrid, DEFAULT_GRID_POINTS, T_MAX, T_MIN};
use crate::rng;
use crate::scalar::{dot, norm_sq, Real};
use crate::score::{ScoreField, Variant};
use crate::stats::{combined, Estimate};

/// Key under which NLL data draws are addressed; grid draws use the grid index.
const NLL_KEY: u64 = u64::MAX;

/// Data entropy `S₀` in nats.
pub fn entropy_s0<T: Real>(data: &Dataset<T>) -> T {
    data.entropy()
}

/// Entropy of the prior `π = N(0, c I)`: `(d/2) ln(2πe c)`.
pub fn entropy_s1<T: Real>(proc: &DiffusionProcess<T>) -> T {
    let d = T::from_usize_lossy(proc.dim);
    T::lit(0.5) * d * (T::TAU() * T::E() * proc.prior_variance()).ln()
}

/// Entropy of the forward marginal `p₁`.
pub fn terminal_entropy<T: Real>(data: &Dataset<T>, proc: &DiffusionProcess<T>) -> Result<T> {
    data.marginal_entropy(proc, T::one())
}

/// `KL(p₁ ‖ π)`.
pub fn prior_kl<T: Real>(data: &Dataset<T>, proc: &DiffusionProcess<T>) -> Result<T> {
    Ok(data.prior_cross_entropy(proc) - terminal_entropy(data, proc)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    /// Evenly spaced in `ln(a(t)/α(t)²)`.
    #[default]
    LogNoise,
    /// Evenly spaced in `t`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub steps: usize,
    pub schedule: StepSchedule,
    pub t_min: f64,
    pub t_max: f64,
    pub hutchinson: Hutchinson,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { steps: 256, schedule: StepSchedule::LogNoise, t_min: T_MIN, t_max: T_MAX, hutchinson: Hutchinson::default() }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("ODE needs at least one step".into()));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::InvalidParameter(format!("invalid ODE range [{}, {}]", self.t_min, self.t_max)));
        }
        Ok(())
    }

    /// Step boundaries `t_min = t₀ < … < t_n = t_max`.
    pub fn times<T: Real>(&self, proc: &DiffusionProcess<T>) -> Vec<f64> {
        let n = self.steps;
        match self.schedule {
            StepSchedule::Uniform => {
                let h = (self.t_max - self.t_min) / n as f64;
                (0..=n).map(|k| if k == n { self.t_max } else { self.t_min + k as f64 * h }).collect()
            }
            StepSchedule::LogNoise => {
                let lam = |t: f64| proc.log_noise_clock(T::lit(t)).as_f64();
                let (l0, l1) = (lam(self.t_min), lam(self.t_max));
                (0..=n)
                    .map(|k| {
                        if k == 0 {
                            return self.t_min;
                        }
                        if k == n {
                            return self.t_max;
                        }
                        proc.time_at_log_noise(l0 + (l1 - l0) * k as f64 / n as f64, self.t_min, self.t_max)
                    })
                    .collect()
            }
        }
    }
}

/// Velocity `f − ½g² s_θ` and its divergence at `(x, t)`.
fn flow<T: Real>(
    field: &ScoreField<T>,
    proc: &DiffusionProcess<T>,
    x: &[T],
    t: T,
    hutch: &Hutchinson,
    key: u64,
    out: &mut [T],
) -> Result<T> {
    field.evaluate(x, t, out)?;
    let g2 = proc.g_squared(t)?;
    let c = proc.drift_coefficient(t);
    let half = T::lit(0.5);
    for (o, &xi) in out.iter_mut().zip(x) {
        *o = c * xi - half * g2 * *o;
    }
    let div = field.divergence(x, t, hutch, key)?.value;
    Ok(proc.drift_divergence(t)? - half * g2 * div)
}

/// Per-sample `−ln p_θ(x₀)` by RK4 on the probability-flow ODE.
pub fn nll_ode_samples<T: Real>(
    field: &ScoreField<T>,
    proc: &DiffusionProcess<T>,
    cfg: &OdeConfig,
    x0: &[T],
) -> Result<Vec<T>> {
    cfg.validate()?;
    if field.process() != proc {
        return Err(Error::ProcessMismatch);
    }
    let d = proc.dim;
    if x0.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !x0.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() % d });
    }
    let ts = cfg.times(proc);
    let hutch = cfg.hutchinson;
    (0..x0.len() / d)
        .into_par_iter()
        .map(|i| {
            let mut x = x0[i * d..(i + 1) * d].to_vec();
            let mut ell = T::zero();
            let (mut k1, mut k2, mut k3, mut k4) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
            let mut y = vec![T::zero(); d];
            let two = T::lit(2.0);
            let sixth = T::one() / T::lit(6.0);
            for j in 0..cfg.steps {
                let (ta, tb) = (ts[j], ts[j + 1]);
                let h = T::lit(tb - ta);
                let tm = T::lit(0.5 * (ta + tb));
                let key = |stage: u64| rng::mix(i as u64, j as u64, stage);
                let d1 = flow(field, proc, &x, T::lit(ta), &hutch, key(0), &mut k1)?;
                for m in 0..d {
                    y[m] = x[m] + T::lit(0.5) * h * k1[m];
                }
                let d2 = flow(field, proc, &y, tm, &hutch, key(1), &mut k2)?;
                for m in 0..d {
                    y[m] = x[m] + T::lit(0.5) * h * k2[m];
                }
                let d3 = flow(field, proc, &y, tm, &hutch, key(2), &mut k3)?;
                for m in 0..d {
                    y[m] = x[m] + h * k3[m];
                }
                let d4 = flow(field, proc, &y, T::lit(tb), &hutch, key(3), &mut k4)?;
                for m in 0..d {
                    let xm = x[m];
                    x[m] = xm + h * sixth * (k1[m] + two * k2[m] + two * k3[m] + k4[m]);
                }
                let dl = h * sixth * (d1 + two * d2 + two * d3 + d4);
                if !dl.is_finite() {
                    return Err(Error::DivergenceFailure { index: i, t: tb });
                }
                ell += dl;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { index: i, t: tb });
                }
            }
            Ok(-(proc.prior_log_density_unchecked(&x) + ell))
        })
        .collect()
}

/// NLL in nats with its bits-per-dimension view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate<T> {
    pub nats: Estimate<T>,
    pub bpd: Estimate<T>,
    #[serde(skip)]
    pub per_sample: Vec<T>,
}

/// Nats to bits per dimension.
pub fn to_bpd<T: Real>(nats: T, dim: usize) -> T {
    nats / (T::from_usize_lossy(dim) * T::LN_2())
}

/// NLL over `n` data draws addressed by `seed`. The data log-density is
/// used as a control variate: the estimate is `S₀ + mean(nllᵢ + ln p₀(xᵢ))`,
/// which is unbiased and whose error reflects only the model mismatch.
pub fn nll_ode<T: Real>(
    field: &ScoreField<T>,
    data: &Dataset<T>,
    proc: &DiffusionProcess<T>,
    cfg: &OdeConfig,
    n: usize,
    seed: u64,
) -> Result<NllEstimate<T>> {
    check_dim(proc.dim, data.dim())?;
    let x0 = data.batch(n, seed, NLL_KEY);
    let per_sample = nll_ode_samples(field, proc, cfg, &x0)?;
    let d = proc.dim;
    let excess: Vec<T> =
        per_sample.iter().zip(x0.chunks(d)).map(|(&v, x)| v + data.log_density(x)).collect();
    let nats = Estimate::from_samples(&excess).ok_or(Error::EmptyBatch)?.shift(data.entropy());
    let c = T::one() / (T::from_usize_lossy(proc.dim) * T::LN_2());
    Ok(NllEstimate { nats, bpd: nats.scale(c), per_sample })
}

/// Whether every grid node draws fresh samples or all nodes reuse the same
/// `(x₀, z)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    Independent,
    Common,
}

/// `g²`-weighted time integrals, each as `½ Σ_k w_k g_k² mean(·)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreIntegrals<T> {
    pub theta: Estimate<T>,
    pub truth: Option<Estimate<T>>,
    pub cross: Option<Estimate<T>>,
    pub diff: Option<Estimate<T>>,
}

/// Estimates the score integrals on `grid`; standard errors come from
/// per-sample path sums, so they are valid in either sampling mode.
pub fn score_integrals<T: Real>(
    field: &ScoreField<T>,
    truth: Option<&ScoreField<T>>,
    data: &Dataset<T>,
    proc: &DiffusionProcess<T>,
    grid: &TimeGrid<T>,
    batch: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<ScoreIntegrals<T>> {
    check_dim(proc.dim, data.dim())?;
    if field.process() != proc || truth.is_some_and(|s| s.process() != proc) {
        return Err(Error::ProcessMismatch);
    }
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let d = proc.dim;
    let half = T::lit(0.5);
    let nodes: Vec<(T, T, crate::process::MarginalTransition<T>, u64)> = grid
        .times()
        .iter()
        .zip(grid.weights())
        .enumerate()
        .map(|(k, (&t, &w))| {
            let key = match mode {
                SamplingMode::Independent => k as u64,
                SamplingMode::Common => 0,
            };
            Ok((t, half * w * proc.g_squared(t)?, proc.marginal(t)?, rng::derive(seed, rng::domain::DATA, key)))
        })
        .collect::<Result<_>>()?;
    let sums: Vec<Result<[T; 4]>> = (0..batch)
        .into_par_iter()
        .map(|i| {
            let mut acc = [T::zero(); 4];
            let mut x = vec![T::zero(); d];
            let mut s = vec![T::zero(); d];
            let mut r = vec![T::zero(); d];
            for &(t, c, m, base) in &nodes {
                data.sample_marginal(m, &mut rng::stream(base, i as u64, 0), &mut x);
                field.evaluate(&x, t, &mut s)?;
                acc[0] += c * norm_sq(&s);
                if let Some(tr) = truth {
                    tr.evaluate(&x, t, &mut r)?;
                    acc[1] += c * norm_sq(&r);
                    acc[2] += c * dot(&s, &r);
                    let mut e = T::zero();
                    for k in 0..d {
                        let v = s[k] - r[k];
                        e += v * v;
                    }
                    acc[3] += c * e;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut cols: [Vec<T>; 4] = Default::default();
    for s in sums {
        let s = s?;
        for (c, v) in cols.iter_mut().zip(s) {
            c.push(v);
        }
    }
    let est = |v: &[T]| Estimate::from_samples(v).ok_or(Error::EmptyBatch);
    let theta = est(&cols[0])?;
    Ok(match truth {
        None => ScoreIntegrals { theta, truth: None, cross: None, diff: None },
        Some(_) => ScoreIntegrals {
            theta,
            truth: Some(est(&cols[1])?),
            cross: Some(est(&cols[2])?),
            diff: Some(est(&cols[3])?),
        },
    })
}

/// `I_θ = ½ Σ_k w_k g_k² mean‖s_θ‖²`.
pub fn integral_i_theta<T: Real>(
    field: &ScoreField<T>,
    data: &Dataset<T>,
    proc: &DiffusionProcess<T>,
    grid: &TimeGrid<T>,
    batch: usize,
    seed: u64,
) -> Result<Estimate<T>> {
    Ok(score_integrals(field, None, data, proc, grid, batch, seed, SamplingMode::Independent)?.theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffIntegral<T> {
    pub direct: Estimate<T>,
    pub polarized: Estimate<T>,
}

impl<T: Real> ScoreIntegrals<T> {
    /// `I_diff` direct and assembled as `I_θ + I_true − 2 I_cross`.
    pub fn diff_pair(&self) -> Option<DiffIntegral<T>> {
        let (tr, cr, df) = (self.truth?, self.cross?, self.diff?);
        let value = self.theta.value + tr.value - T::lit(2.0) * cr.value;
        let se = combined(combined(self.theta.stderr, tr.stderr), T::lit(2.0) * cr.stderr);
        Some(DiffIntegral { direct: df, polarized: Estimate::new(value, se) })
    }
}

/// `I_diff = ½ Σ_k w_k g_k² mean‖s_θ − s_true‖²` by both routes.
pub fn integral_i_diff<T: Real>(
    field: &ScoreField<T>,
    truth: &ScoreField<T>,
    data: &Dataset<T>,
    proc: &DiffusionProcess<T>,
    grid: &TimeGrid<T>,
    batch: usize,
    seed: u64,
) -> Result<DiffIntegral<T>> {
    let s = score_integrals(field, Some(truth), data, proc, grid, batch, seed, SamplingMode::Independent)?;
    Ok(s.diff_pair().expect("truth supplied"))
}

/// Settings of a bound evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    pub grid_points: usize,
    pub spacing: GridSpacing,
    pub batch: usize,
    /// Trajectories for the ODE likelihood; `0` means `batch`.
    pub nll_batch: usize,
    pub ode: OdeConfig,
    pub seed: u64,
    pub sampling: SamplingMode,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            grid_points: DEFAULT_GRID_POINTS,
            spacing: GridSpacing::LogNoise,
            batch: 4096,
            nll_batch: 0,
            ode: OdeConfig::default(),
            seed: 0,
            sampling: SamplingMode::Independent,
        }
    }
}

impl BoundConfig {
    pub fn grid<T: Real>(&self, proc: &DiffusionProcess<T>) -> Result<TimeGrid<T>> {
        TimeGrid::with_spacing(self.spacing, proc, T::lit(self.ode.t_min), T::lit(self.ode.t_max), self.grid_points)
    }

    pub fn nll_batch(&self) -> usize {
        if self.nll_batch == 0 {
            self.batch
        } else {
            self.nll_batch
        }
    }
}

/// Headline quantities in bits per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpdView<T> {
    pub s0: T,
    pub s1: T,
    pub nll_ode: T,
    pub bound: T,
    pub gap: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<T> {
    pub dim: usize,
    pub process: ProcessKind,
    pub sigma: T,
    pub data: DataKind,
    pub field: Variant,
    /// Data entropy.
    pub s0: T,
    /// Entropy of the terminal marginal `p₁`.
    pub s1: T,
    /// Entropy of the prior `π`.
    pub s1_prior: T,
    /// `KL(p₁ ‖ π)`.
    pub prior_kl: T,
    /// `∫ E[∇·f] dt` over the clipped range.
    pub drift_integral: T,
    pub i_theta: Estimate<T>,
    /// `∫ Ṡ_θ dt = ∫ E[∇·f] + I_θ`.
    pub system_integral: Estimate<T>,
    pub i_true: Option<Estimate<T>>,
    pub i_diff: Option<Estimate<T>>,
    pub i_diff_polarization: Option<Estimate<T>>,
    pub nll_ode: Estimate<T>,
    pub nll_decomposition: Option<Estimate<T>>,
    pub consistency_residual: Option<Estimate<T>>,
    pub bound: Estimate<T>,
    pub gap: Estimate<T>,
    /// `½[(S₁ − S₀) − (S(t_max) − S(t_min))]`: how far clipping lifts the exact-score bound.
    pub clipping_residual: T,
    pub bpd: BpdView<T>,
    pub grid_points: usize,
    pub batch: usize,
    pub nll_batch: usize,
    pub ode_steps: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub uniform_clamp_events: u64,
    pub config_hash: Option<String>,
}

impl<T: Real> BoundReport<T> {
    /// Gap in units of its standard error.
    pub fn gap_z(&self) -> T {
        self.gap.z_score(T::zero())
    }

    /// The bound holds up to estimator noise: `gap ≥ −k·stderr`.
    pub fn bound_holds(&self, k: T) -> bool {
        self.gap.value >= -k * self.gap.stderr
    }

    /// `(S₀ + S₁)/2 − ½∫Ṡ_θ` from the stored parts.
    pub fn recomputed_bound(&self) -> T {
        T::lit(0.5) * (self.s0 + self.s1) - T::lit(0.5) * self.system_integral.value
    }

    /// Flat `(column, value)` pairs for one CSV row.
    pub fn csv_fields(&self) -> Vec<(&'static str, String)> {
        let opt = |e: Option<Estimate<T>>| e.map(|e| (e.value.to_string(), e.stderr.to_string())).unwrap_or_default();
        let (it, it_se) = opt(self.i_true);
        let (id, id_se) = opt(self.i_diff);
        let (ip, ip_se) = opt(self.i_diff_polarization);
        let (nd, nd_se) = opt(self.nll_decomposition);
        vec![
            ("config_hash", self.config_hash.clone().unwrap_or_default()),
            ("process", self.process.to_string()),
            ("sigma", self.sigma.to_string()),
            ("data", self.data.to_string()),
            ("field", self.field.to_string()),
            ("dim", self.dim.to_string()),
            ("s0", self.s0.to_string()),
            ("s1", self.s1.to_string()),
            ("s1_prior", self.s1_prior.to_string()),
            ("prior_kl", self.prior_kl.to_string()),
            ("i_theta", self.i_theta.value.to_string()),
            ("i_theta_err", self.i_theta.stderr.to_string()),
            ("i_true", it),
            ("i_true_err", it_se),
            ("i_diff", id),
            ("i_diff_err", id_se),
            ("i_diff_polarization", ip),
            ("i_diff_polarization_err", ip_se),
            ("nll_ode", self.nll_ode.value.to_string()),
            ("nll_ode_err", self.nll_ode.stderr.to_string()),
            ("nll_decomposition", nd),
            ("nll_decomposition_err", nd_se),
            ("bound", self.bound.value.to_string()),
            ("bound_err", self.bound.stderr.to_string()),
            ("gap", self.gap.value.to_string()),
            ("gap_err", self.gap.stderr.to_string()),
            ("clipping_residual", self.clipping_residual.to_string()),
            ("nll_bpd", self.bpd.nll_ode.to_string()),
            ("bound_bpd", self.bpd.bound.to_string()),
            ("gap_bpd", self.bpd.gap.to_string()),
            ("grid_points", self.grid_points.to_string()),
            ("batch", self.batch.to_string()),
            ("ode_steps", self.ode_steps.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

fn clamp_events<T: Real>(field: &ScoreField<T>) -> u64 {
    match field {
        ScoreField::ExactUniform(u) => u.clamp_count(),
        ScoreField::Perturbed(p) => clamp_events(&p.base),
        _ => 0,
    }
}

/// Assembles every term of the bound for one field.
pub fn bound_and_gap<T: Real>(
    field: &ScoreField<T>,
    truth: Option<&ScoreField<T>>,
    data: &Dataset<T>,
    proc: &DiffusionProcess<T>,
    cfg: &BoundConfig,
) -> Result<BoundReport<T>> {
    let grid = cfg.grid(proc)?;
    let half = T::lit(0.5);
    let s0 = entropy_s0(data);
    let s1 = terminal_entropy(data, proc)?;
    let kl = prior_kl(data, proc)?;
    let drift_integral = proc.integrated_drift_divergence(grid.t_min(), grid.t_max());
    let ints = score_integrals(field, truth, data, proc, &grid, cfg.batch, rng::derive(cfg.seed, 0x10, 0), cfg.sampling)?;
    let system_integral = ints.theta.shift(drift_integral);
    let bound = Estimate::new(half * (s0 + s1) - half * system_integral.value, half * system_integral.stderr);
    let nll = nll_ode(field, data, proc, &cfg.ode, cfg.nll_batch(), rng::derive(cfg.seed, 0x11, 0))?;
    let gap = nll.nats.sub_independent(bound);
    let pair = ints.diff_pair();
    let nll_decomposition = ints.diff.map(|d| {
        Estimate::new(
            bound.value + kl + half * d.value,
            combined(bound.stderr, half * d.stderr),
        )
    });
    let consistency_residual = nll_decomposition.map(|nd| nll.nats.sub_independent(nd));
    let clipping_residual = half
        * ((s1 - s0) - (data.marginal_entropy(proc, grid.t_max())? - data.marginal_entropy(proc, grid.t_min())?));
    let d = proc.dim;
    Ok(BoundReport {
        dim: d,
        process: proc.kind,
        sigma: proc.sigma,
        data: match data {
            Dataset::Uniform { .. } => DataKind::UniformUnit,
            Dataset::Gaussian(g) if g.eigen.is_diagonal_basis() => DataKind::GaussianProduct,
            Dataset::Gaussian(_) => DataKind::GaussianFull,
        },
        field: field.variant(),
        s0,
        s1,
        s1_prior: entropy_s1(proc),
        prior_kl: kl,
        drift_integral,
        i_theta: ints.theta,
        system_integral,
        i_true: ints.truth,
        i_diff: pair.map(|p| p.direct),
        i_diff_polarization: pair.map(|p| p.polarized),
        nll_ode: nll.nats,
        nll_decomposition,
        consistency_residual,
        bound,
        gap,
        clipping_residual,
        bpd: BpdView {
            s0: to_bpd(s0, d),
            s1: to_bpd(s1, d),
            nll_ode: nll.bpd.value,
            bound: to_bpd(bound.value, d),
            gap: to_bpd(gap.value, d),
        },
        grid_points: cfg.grid_points,
        batch: cfg.batch,
        nll_batch: cfg.nll_batch(),
        ode_steps: cfg.ode.steps,
        seed: cfg.seed,
        sampling: cfg.sampling,
        uniform_clamp_events: clamp_events(field) + truth.map_or(0, clamp_events),
        config_hash: None,
    })
}
