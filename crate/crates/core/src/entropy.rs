//! Intrinsic, exchange and system entropy rates.
//!
//! Rates are per unit of the picture's own clock: `t` for the forward
//! process, `τ = 1 − t` for the controlled-forward (generative) process.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::divergence::Hutchinson;
use crate::error::{check_dim, Error, Result};
use crate::process::DiffusionProcess;
use crate::quadrature::TimeGrid;
use crate::rng;
use crate::sampler::{controlled_forward_ensemble, SamplerConfig, TrajectoryEnsemble};
use crate::scalar::{dot, norm_sq, Real};
use crate::score::ScoreField;
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Picture {
    Forward,
    ControlledForward,
}

impl std::fmt::Display for Picture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Picture::Forward => "forward",
            Picture::ControlledForward => "controlled-forward",
        })
    }
}

/// How the exchange rate of the controlled-forward picture is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlugIn {
    /// `−g² E‖s_θ‖²`.
    NormBased,
    /// `g² E[∇·s_θ]`.
    DivergenceBased,
}

impl std::fmt::Display for PlugIn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlugIn::NormBased => "norm-based",
            PlugIn::DivergenceBased => "divergence-based",
        })
    }
}

/// Per-sample contributions at one time.
struct PerSample<T> {
    intrinsic: Vec<T>,
    exchange: Vec<T>,
}

impl<T: Real> PerSample<T> {
    fn estimates(&self) -> Result<[Estimate<T>; 3]> {
        let sum: Vec<T> = self.intrinsic.iter().zip(&self.exchange).map(|(&a, &b)| a + b).collect();
        let est = |v: &[T]| Estimate::from_samples(v).ok_or(Error::EmptyBatch);
        Ok([est(&self.intrinsic)?, est(&self.exchange)?, est(&sum)?])
    }
}

fn rows<T: Real>(xs: &[T], d: usize) -> Result<usize> {
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !xs.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch { expected: d, got: xs.len() % d });
    }
    Ok(xs.len() / d)
}

fn per_sample<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    t: T,
    xs: &[T],
    picture: Picture,
    plug_in: Option<PlugIn>,
    hutchinson: &Hutchinson,
    key: u64,
) -> Result<PerSample<T>> {
    let d = proc.dim;
    check_dim(d, field.dim())?;
    let n = rows(xs, d)?;
    if picture == Picture::ControlledForward && plug_in.is_none() {
        return Err(Error::InvalidParameter("controlled-forward exchange rate needs a plug-in".into()));
    }
    let g2 = proc.g_squared(t)?;
    let c = proc.drift_coefficient(t);
    let div_f = proc.drift_divergence(t)?;
    let two = T::lit(2.0);
    let vals: Vec<Result<(T, T)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &xs[i * d..(i + 1) * d];
            let s = field.score(x, t)?;
            let f: Vec<T> = x.iter().map(|&v| c * v).collect();
            let mut r = T::zero();
            for k in 0..d {
                let v = two * f[k] - g2 * s[k];
                r += v * v;
            }
            let intrinsic = r / (two * g2);
            let fs = dot(&f, &s);
            let ff = norm_sq(&f);
            let exchange = match picture {
                Picture::Forward => -(two / g2) * ff + fs,
                Picture::ControlledForward => {
                    let score_part = match plug_in.expect("checked above") {
                        PlugIn::NormBased => -g2 * norm_sq(&s),
                        PlugIn::DivergenceBased => {
                            let key = rng::mix(key, i as u64, 0);
                            g2 * field.divergence(x, t, hutchinson, key)?.value
                        }
                    };
                    score_part - div_f - (two / g2) * ff + two * fs
                }
            };
            Ok((intrinsic, exchange))
        })
        .collect();
    let mut out = PerSample { intrinsic: Vec::with_capacity(n), exchange: Vec::with_capacity(n) };
    for v in vals {
        let (a, b) = v?;
        out.intrinsic.push(a);
        out.exchange.push(b);
    }
    Ok(out)
}

/// Intrinsic rate `(1/(2g²)) E‖2f − g² s_θ‖²`; with `f = 0` this is
/// `(g²/2) E‖s_θ‖²`, the same in both pictures.
pub fn intrinsic_rate<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    t: T,
    xs: &[T],
    picture: Picture,
) -> Result<Estimate<T>> {
    let plug = (picture == Picture::ControlledForward).then_some(PlugIn::NormBased);
    let p = per_sample(proc, field, t, xs, picture, plug, &Hutchinson::default(), 0)?;
    Ok(p.estimates()?[0])
}

/// Exchange rate. Forward: `−(2/g²)E‖f‖² + E[f·s_θ]`. Controlled-forward: the
/// plug-in term (`−g²E‖s_θ‖²` or `g²E[∇·s_θ]`) plus drift terms
/// `−∇·f − (2/g²)E‖f‖² + 2E[f·s_θ]` that vanish for VE.
pub fn exchange_rate<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    t: T,
    xs: &[T],
    picture: Picture,
    plug_in: Option<PlugIn>,
    hutchinson: &Hutchinson,
    key: u64,
) -> Result<Estimate<T>> {
    Ok(per_sample(proc, field, t, xs, picture, plug_in, hutchinson, key)?.estimates()?[1])
}

/// Forward-picture system rate `E[∇·f] + (g²/2) E‖s_θ‖²`: the `Ṡ_θ` of the bound.
pub fn system_rate<T: Real>(proc: &DiffusionProcess<T>, field: &ScoreField<T>, t: T, xs: &[T]) -> Result<Estimate<T>> {
    let d = proc.dim;
    check_dim(d, field.dim())?;
    let n = rows(xs, d)?;
    let g2 = proc.g_squared(t)?;
    let div_f = proc.drift_divergence(t)?;
    let vals: Result<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| Ok(div_f + T::lit(0.5) * g2 * norm_sq(&field.score(&xs[i * d..(i + 1) * d], t)?)))
        .collect();
    Estimate::from_samples(&vals?).ok_or(Error::EmptyBatch)
}

/// Rate curves on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRateSeries<T> {
    /// `t` for the forward picture, `τ` for the controlled-forward picture.
    pub times: Vec<T>,
    pub intrinsic: Vec<T>,
    pub exchange: Vec<T>,
    pub system: Vec<T>,
    pub stderr_intrinsic: Vec<T>,
    pub stderr_exchange: Vec<T>,
    pub stderr_system: Vec<T>,
    pub picture: Picture,
    pub plug_in: PlugIn,
}

impl<T: Real> EntropyRateSeries<T> {
    fn new(picture: Picture, plug_in: PlugIn) -> Self {
        Self {
            times: Vec::new(),
            intrinsic: Vec::new(),
            exchange: Vec::new(),
            system: Vec::new(),
            stderr_intrinsic: Vec::new(),
            stderr_exchange: Vec::new(),
            stderr_system: Vec::new(),
            picture,
            plug_in,
        }
    }

    fn push(&mut self, t: T, [i, e, s]: [Estimate<T>; 3]) {
        self.times.push(t);
        self.intrinsic.push(i.value);
        self.stderr_intrinsic.push(i.stderr);
        self.exchange.push(e.value);
        self.stderr_exchange.push(e.stderr);
        self.system.push(s.value);
        self.stderr_system.push(s.stderr);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,Si,Si_err,Se,Se_err,S,S_err,picture,plug_in")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                self.times[k],
                self.intrinsic[k],
                self.stderr_intrinsic[k],
                self.exchange[k],
                self.stderr_exchange[k],
                self.system[k],
                self.stderr_system[k],
                self.picture,
                self.plug_in
            )?;
        }
        Ok(())
    }
}

/// Settings shared by the series estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateConfig {
    pub batch: usize,
    pub seed: u64,
    pub hutchinson: Hutchinson,
    /// Euler–Maruyama steps between consecutive grid points.
    pub substeps: usize,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self { batch: 4096, seed: 0, hutchinson: Hutchinson::default(), substeps: 8 }
    }
}

/// Forward-picture curves with samples drawn from the analytic marginals.
pub fn forward_series<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    data: &Dataset<T>,
    grid: &TimeGrid<T>,
    cfg: &RateConfig,
) -> Result<EntropyRateSeries<T>> {
    let mut out = EntropyRateSeries::new(Picture::Forward, PlugIn::NormBased);
    for (k, &t) in grid.times().iter().enumerate() {
        let xs = data.marginal_batch(proc, t, cfg.batch, cfg.seed, k as u64)?;
        let p = per_sample(proc, field, t, &xs, Picture::Forward, None, &cfg.hutchinson, k as u64)?;
        out.push(t, p.estimates()?);
    }
    Ok(out)
}

fn check_uniform<T: Real>(grid: &TimeGrid<T>) -> Result<()> {
    let ts = grid.times();
    let h = (grid.t_max() - grid.t_min()) / T::from_usize_lossy(ts.len() - 1);
    let tol = T::lit(1e-9) * (T::one() + h.recip());
    if ts.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= tol * h) {
        Ok(())
    } else {
        Err(Error::InvalidParameter("controlled-forward series needs a uniform grid".into()))
    }
}

/// The ensemble whose recorded states sit on the grid times, reversed into `τ`.
pub fn grid_ensemble<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    grid: &TimeGrid<T>,
    cfg: &RateConfig,
) -> Result<TrajectoryEnsemble<T>> {
    check_uniform(grid)?;
    let sub = cfg.substeps.max(1);
    let sc = SamplerConfig {
        steps: (grid.len() - 1) * sub,
        t_min: grid.t_min().as_f64(),
        t_max: grid.t_max().as_f64(),
        record_every: sub,
        denoise_last: false,
    };
    controlled_forward_ensemble(proc, field, cfg.batch, &sc, cfg.seed)
}

/// Per-path rate values along an ensemble: `[step][path]` for intrinsic and exchange.
fn ensemble_values<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    ens: &TrajectoryEnsemble<T>,
    plug_in: PlugIn,
    hutchinson: &Hutchinson,
) -> Result<Vec<PerSample<T>>> {
    let ts = ens.forward_times();
    (0..ens.times.len())
        .map(|k| {
            let xs = ens.slice_at(k);
            let t = ts[k].max(T::zero()).min(T::one());
            per_sample(proc, field, t, &xs, Picture::ControlledForward, Some(plug_in), hutchinson, k as u64)
        })
        .collect()
}

/// Controlled-forward curves from an Euler–Maruyama ensemble, indexed by `τ`.
pub fn controlled_forward_series<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    grid: &TimeGrid<T>,
    plug_in: PlugIn,
    cfg: &RateConfig,
) -> Result<EntropyRateSeries<T>> {
    let ens = grid_ensemble(proc, field, grid, cfg)?;
    let vals = ensemble_values(proc, field, &ens, plug_in, &cfg.hutchinson)?;
    let mut out = EntropyRateSeries::new(Picture::ControlledForward, plug_in);
    for (k, v) in vals.iter().enumerate() {
        out.push(ens.times[k], v.estimates()?);
    }
    Ok(out)
}

/// Controlled-forward bookkeeping over a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonLedger<T> {
    pub series: EntropyRateSeries<T>,
    /// Same ensemble with the norm-based exchange plug-in.
    pub norm_series: EntropyRateSeries<T>,
    pub total_intrinsic: Estimate<T>,
    pub total_exchange: Estimate<T>,
    pub total_system: Estimate<T>,
    /// `−∫Ṡ dτ`.
    pub entropy_removed: Estimate<T>,
}

/// Rate curves (divergence-based by default) and their `τ`-integrals.
pub fn demon_ledger<T: Real>(
    proc: &DiffusionProcess<T>,
    field: &ScoreField<T>,
    grid: &TimeGrid<T>,
    plug_in: PlugIn,
    cfg: &RateConfig,
) -> Result<DemonLedger<T>> {
    let ens = grid_ensemble(proc, field, grid, cfg)?;
    let tau_grid = TimeGrid::from_times(ens.times.clone())?;
    let w = tau_grid.weights();
    let main = ensemble_values(proc, field, &ens, plug_in, &cfg.hutchinson)?;
    let other = match plug_in {
        PlugIn::NormBased => PlugIn::DivergenceBased,
        PlugIn::DivergenceBased => PlugIn::NormBased,
    };
    let alt = ensemble_values(proc, field, &ens, other, &cfg.hutchinson)?;
    let mut series = EntropyRateSeries::new(Picture::ControlledForward, plug_in);
    let mut norm_series = EntropyRateSeries::new(Picture::ControlledForward, PlugIn::NormBased);
    for k in 0..ens.times.len() {
        series.push(ens.times[k], main[k].estimates()?);
        let src = if plug_in == PlugIn::NormBased { &main[k] } else { &alt[k] };
        norm_series.push(ens.times[k], src.estimates()?);
    }
    let n = ens.paths;
    let path_total = |pick: &dyn Fn(&PerSample<T>, usize) -> T| -> Result<Estimate<T>> {
        let v: Vec<T> = (0..n).map(|p| (0..w.len()).map(|k| w[k] * pick(&main[k], p)).sum()).collect();
        Estimate::from_samples(&v).ok_or(Error::EmptyBatch)
    };
    let total_intrinsic = path_total(&|s, p| s.intrinsic[p])?;
    let total_exchange = path_total(&|s, p| s.exchange[p])?;
    let total_system = path_total(&|s, p| s.intrinsic[p] + s.exchange[p])?;
    Ok(DemonLedger {
        series,
        norm_series,
        total_intrinsic,
        total_exchange,
        total_system,
        entropy_removed: total_system.scale(-T::one()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn gaussian(d: usize) -> (DiffusionProcess<f64>, Dataset<f64>, ScoreField<f64>) {
        let p = DiffusionProcess::ve(10.0, d).unwrap();
        let data = DatasetSpec::standard_gaussian(d).prepare().unwrap();
        let f = ScoreField::exact_for(&data, &p).unwrap();
        (p, data, f)
    }

    #[test]
    fn intrinsic_matches_closed_form() {
        let (p, data, f) = gaussian(1);
        let t = 0.5;
        let xs = data.marginal_batch(&p, t, 20000, 1, 0).unwrap();
        let est = intrinsic_rate(&p, &f, t, &xs, Picture::Forward).unwrap();
        let v = p.variance_increment(t).unwrap();
        let exact = 10.0 / (2.0 * (1.0 + v));
        assert!(est.z_score(exact).abs() < 3.0, "{est:?} vs {exact}");
        let cf = intrinsic_rate(&p, &f, t, &xs, Picture::ControlledForward).unwrap();
        assert_eq!(est, cf);
    }

    #[test]
    fn forward_exchange_vanishes_for_ve() {
        let (p, data, f) = gaussian(2);
        let xs = data.marginal_batch(&p, 0.3, 64, 1, 0).unwrap();
        let e = exchange_rate(&p, &f, 0.3, &xs, Picture::Forward, None, &Hutchinson::default(), 0).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn norm_exchange_is_minus_twice_intrinsic() {
        let (p, data, f) = gaussian(2);
        let xs = data.marginal_batch(&p, 0.7, 256, 4, 0).unwrap();
        let h = Hutchinson::default();
        let i = intrinsic_rate(&p, &f, 0.7, &xs, Picture::ControlledForward).unwrap();
        let e = exchange_rate(&p, &f, 0.7, &xs, Picture::ControlledForward, Some(PlugIn::NormBased), &h, 0).unwrap();
        assert!((e.value + 2.0 * i.value).abs() < 1e-12 * i.value);
    }

    #[test]
    fn controlled_forward_requires_plug_in() {
        let (p, data, f) = gaussian(1);
        let xs = data.marginal_batch(&p, 0.5, 4, 1, 0).unwrap();
        let h = Hutchinson::default();
        assert!(exchange_rate(&p, &f, 0.5, &xs, Picture::ControlledForward, None, &h, 0).is_err());
        assert!(matches!(system_rate(&p, &f, 0.5, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_field_gives_flat_zero_curves() {
        let p = DiffusionProcess::ve(10.0, 1).unwrap();
        let f = ScoreField::zero(&p);
        let grid = TimeGrid::clipped(5).unwrap();
        let cfg = RateConfig { batch: 32, substeps: 2, ..RateConfig::default() };
        let led = demon_ledger(&p, &f, &grid, PlugIn::DivergenceBased, &cfg).unwrap();
        for v in [&led.series.intrinsic, &led.series.exchange, &led.series.system] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
        assert_eq!(led.total_system.value, 0.0);
    }

    #[test]
    fn vp_stationary_system_rate_vanishes() {
        let p = DiffusionProcess::<f64>::vp(10.0, 0.5, 2).unwrap();
        let data = DatasetSpec::standard_gaussian(2).prepare().unwrap();
        let f = ScoreField::exact_for(&data, &p).unwrap();
        let xs = data.marginal_batch(&p, 0.4, 4000, 2, 0).unwrap();
        let s = system_rate(&p, &f, 0.4, &xs).unwrap();
        assert!(s.z_score(0.0).abs() < 3.0, "{s:?}");
    }

    #[test]
    fn csv_columns() {
        let (p, data, f) = gaussian(1);
        let grid = TimeGrid::clipped(3).unwrap();
        let s = forward_series(&p, &f, &data, &grid, &RateConfig { batch: 8, ..RateConfig::default() }).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,Si,Si_err,Se,Se_err,S,S_err,picture,plug_in\n"));
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().ends_with(",forward,norm-based"));
    }
}
