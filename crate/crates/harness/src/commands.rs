use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thermo_diffusion::entropy::{demon_ledger, forward_series};
use thermo_diffusion::likelihood::bound_and_gap;
use thermo_diffusion::sampler::reverse_sample;
use thermo_diffusion::stats::Moments;
use thermo_diffusion::{
    BoundReport, Checkpoint, Dataset, EntropyRateSeries, Error, Estimate, Field, Picture, PlugIn, Process, ProcessKind,
    ScoreField, TimeGrid, TrainReport, Trainer,
};

use crate::config::{ExperimentConfig, FieldVariant, Format};
use crate::outcome::{Failure, Outcome};
use crate::svg;

/// Writes artifacts into the output directory, each tagged with the config hash.
pub struct Sink<'a> {
    cfg: &'a ExperimentConfig,
    pub hash: String,
    pub outcome: Outcome,
}

impl<'a> Sink<'a> {
    /// Creates the directory and writes the materialised config into it.
    pub fn open(cfg: &'a ExperimentConfig) -> Result<Self, Failure> {
        let hash = cfg.hash();
        fs::create_dir_all(&cfg.output.dir)
            .map_err(|e| Failure::Config(format!("cannot create {}: {e}", cfg.output.dir.display())))?;
        let mut s = Self { cfg, hash, outcome: Outcome::default() };
        let text = format!("# config_hash = \"{}\"\n{}", s.hash, cfg.to_toml());
        s.write("config.toml", text)?;
        Ok(s)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Failure::Config(format!("cannot write {}: {e}", p.display())))?;
        self.outcome.artifacts.push(p);
        Ok(())
    }

    pub fn meta(&self) -> serde_json::Value {
        json!({ "config_hash": self.hash, "seeds": self.cfg.seeds() })
    }

    /// First line of every CSV file.
    pub fn csv_preamble(&self) -> String {
        let seeds: Vec<String> = self.cfg.seeds().iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("# config_hash={} seeds:{}\n", self.hash, seeds.join(","))
    }

    pub fn write_json(&mut self, name: &str, body: serde_json::Value) -> Result<(), Failure> {
        if !self.cfg.wants(Format::Json) {
            return Ok(());
        }
        let mut v = json!({ "meta": self.meta() });
        if let (Some(dst), serde_json::Value::Object(src)) = (v.as_object_mut(), body) {
            dst.extend(src);
        }
        self.write(name, serde_json::to_string_pretty(&v).expect("json") + "\n")
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
        if !self.cfg.wants(Format::Csv) {
            return Ok(());
        }
        let mut w = csv::Writer::from_writer(self.csv_preamble().into_bytes());
        let io = |e: csv::Error| Failure::Config(e.to_string());
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::Config(e.to_string()))?;
        self.write(name, bytes)
    }

    pub fn write_svg(&mut self, name: &str, text: String) -> Result<(), Failure> {
        if self.cfg.wants(Format::Svg) {
            self.write(name, text)
        } else {
            Ok(())
        }
    }

    pub fn note(&self) -> String {
        format!("config_hash={}", self.hash)
    }
}

/// The field a config asks for, with the true score when one exists.
pub struct BuiltField {
    pub field: Field,
    pub truth: Option<Field>,
    pub train: Option<TrainReport>,
}

pub fn read_checkpoint(path: &Path, proc: &Process) -> Result<Checkpoint<f64>, Failure> {
    let ck = Checkpoint::<f64>::read(path).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!("checkpoint {}: {io}", path.display())),
        other => Failure::from(other),
    })?;
    if ck.model.process() != proc {
        return Err(Failure::Config(format!("checkpoint {} was written for a different process", path.display())));
    }
    Ok(ck)
}

pub fn build_field(cfg: &ExperimentConfig, proc: &Process, data: &Dataset<f64>) -> Result<BuiltField, Failure> {
    let truth = match ScoreField::exact_for(data, proc) {
        Ok(f) => Some(f),
        Err(Error::Unsupported { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let mut train = None;
    let field = match cfg.field.variant {
        FieldVariant::Exact => ScoreField::exact_for(data, proc)?,
        FieldVariant::Zero => ScoreField::zero(proc),
        FieldVariant::Perturbed => {
            let spec = cfg.field.perturbation.ok_or_else(|| Failure::Config("missing field.perturbation".into()))?;
            ScoreField::exact_for(data, proc)?.perturbed(spec, data)?
        }
        FieldVariant::Trained => {
            let (f, r) = thermo_diffusion::train(&cfg.field.train, data, proc)?;
            train = Some(r);
            f
        }
        FieldVariant::Checkpoint => {
            let path = cfg.field.checkpoint.as_ref().ok_or_else(|| Failure::Config("missing field.checkpoint".into()))?;
            read_checkpoint(path, proc)?.model.into_field()
        }
    };
    Ok(BuiltField { field, truth, train })
}

pub fn setup(cfg: &ExperimentConfig) -> Result<(Process, Dataset<f64>), Failure> {
    let proc = cfg.process()?;
    let data = cfg.data.prepare()?;
    Ok((proc, data))
}

/// Runs the bound estimators for one config.
pub fn evaluate_bound(cfg: &ExperimentConfig) -> Result<BoundReport<f64>, Failure> {
    let (proc, data) = setup(cfg)?;
    let b = build_field(cfg, &proc, &data)?;
    let mut r = bound_and_gap(&b.field, b.truth.as_ref(), &data, &proc, &cfg.bound())?;
    r.config_hash = Some(cfg.hash());
    Ok(r)
}

fn finite(e: Estimate<f64>) -> bool {
    e.value.is_finite() && e.stderr.is_finite()
}

/// Inequality and consistency checks on a report, at `k` standard errors.
pub fn bound_checks(r: &BoundReport<f64>, k: f64) -> Vec<String> {
    let mut v = Vec::new();
    if !finite(r.nll_ode) || !finite(r.bound) || !finite(r.gap) {
        v.push(format!("non-finite estimate: nll {:?}, bound {:?}", r.nll_ode, r.bound));
        return v;
    }
    if !r.bound_holds(k) {
        v.push(format!("gap {:.6} is below -{k} x stderr {:.6}", r.gap.value, r.gap.stderr));
    }
    if let Some(d) = r.i_diff {
        if d.value < -k * d.stderr {
            v.push(format!("I_diff {:.6} is below -{k} x stderr {:.6}", d.value, d.stderr));
        }
        if let Some(p) = r.i_diff_polarization {
            let se = d.stderr.hypot(p.stderr);
            if (d.value - p.value).abs() > k * se {
                v.push(format!("I_diff direct {:.6} and polarized {:.6} differ by more than {k} x {se:.6}", d.value, p.value));
            }
        }
    }
    v
}

pub fn bound_row(r: &BoundReport<f64>) -> (Vec<&'static str>, Vec<String>) {
    r.csv_fields().into_iter().unzip()
}

pub fn cmd_bound(cfg: &ExperimentConfig) -> Result<(BoundReport<f64>, Outcome), Failure> {
    let report = evaluate_bound(cfg)?;
    let mut sink = Sink::open(cfg)?;
    sink.outcome.violations = bound_checks(&report, cfg.estimation.tolerance);
    sink.write_json("bound.json", json!({ "report": report, "violations": sink.outcome.violations }))?;
    let (h, row) = bound_row(&report);
    sink.write_csv("bound.csv", &h, &[row])?;
    Ok((report, sink.outcome))
}

#[derive(Debug, Serialize)]
pub struct EntropyRun {
    pub series: EntropyRateSeries<f64>,
    /// Norm-based curves on the same ensemble (controlled-forward only).
    pub norm_series: Option<EntropyRateSeries<f64>>,
    pub total_intrinsic: Option<Estimate<f64>>,
    pub total_exchange: Option<Estimate<f64>>,
    pub total_system: Option<Estimate<f64>>,
    /// Largest `|z|` of `Ṡᵉ + 2Ṡⁱ` and `Ṡ + Ṡⁱ` when those identities apply.
    pub max_ratio_z: Option<f64>,
}

/// Whether the 2:1 identities hold exactly for this run.
fn identities_apply(cfg: &ExperimentConfig, proc: &Process, data: &Dataset<f64>, field: &Field) -> bool {
    cfg.entropy.picture == Picture::ControlledForward
        && cfg.entropy.plug_in == PlugIn::DivergenceBased
        && field.is_exact()
        && (proc.kind == ProcessKind::Ve || (data.second_moment() - proc.dim as f64).abs() < 1e-12)
}

pub fn entropy_run(cfg: &ExperimentConfig) -> Result<(EntropyRun, Vec<String>), Failure> {
    let (proc, data) = setup(cfg)?;
    let b = build_field(cfg, &proc, &data)?;
    let grid = TimeGrid::clipped(cfg.estimation.grid_points)?;
    let rates = cfg.rates();
    let mut run = match cfg.entropy.picture {
        Picture::Forward => EntropyRun {
            series: forward_series(&proc, &b.field, &data, &grid, &rates)?,
            norm_series: None,
            total_intrinsic: None,
            total_exchange: None,
            total_system: None,
            max_ratio_z: None,
        },
        Picture::ControlledForward => {
            let led = demon_ledger(&proc, &b.field, &grid, cfg.entropy.plug_in, &rates)?;
            EntropyRun {
                series: led.series,
                norm_series: Some(led.norm_series),
                total_intrinsic: Some(led.total_intrinsic),
                total_exchange: Some(led.total_exchange),
                total_system: Some(led.total_system),
                max_ratio_z: None,
            }
        }
    };
    let k = cfg.estimation.tolerance;
    let s = &run.series;
    let mut v = Vec::new();
    for i in 0..s.len() {
        let vals = [s.intrinsic[i], s.exchange[i], s.system[i], s.stderr_intrinsic[i], s.stderr_exchange[i], s.stderr_system[i]];
        if vals.iter().any(|x| !x.is_finite()) {
            return Err(Failure::Numerical(format!("non-finite entropy rate at {}", s.times[i])));
        }
        if s.intrinsic[i] < -k * s.stderr_intrinsic[i] {
            v.push(format!("intrinsic rate {:.6} < 0 at {}", s.intrinsic[i], s.times[i]));
        }
    }
    if identities_apply(cfg, &proc, &data, &b.field) {
        let mut worst: f64 = 0.0;
        for i in 0..s.len() {
            let z = |a: f64, sa: f64, c: f64, sc: f64| {
                let se = sa.hypot(c.abs() * sc);
                if se > 0.0 { (a + c * s.intrinsic[i]).abs() / se } else { 0.0 }
            };
            let ze = z(s.exchange[i], s.stderr_exchange[i], 2.0, s.stderr_intrinsic[i]);
            let zs = z(s.system[i], s.stderr_system[i], 1.0, s.stderr_intrinsic[i]);
            worst = worst.max(ze).max(zs);
            if ze > k || zs > k {
                v.push(format!("2:1 identity off by {:.2} / {:.2} stderr at tau {}", ze, zs, s.times[i]));
            }
        }
        run.max_ratio_z = Some(worst);
    }
    Ok((run, v))
}

pub fn cmd_entropy(cfg: &ExperimentConfig) -> Result<(EntropyRun, Outcome), Failure> {
    let (run, violations) = entropy_run(cfg)?;
    let mut sink = Sink::open(cfg)?;
    sink.outcome.violations = violations;
    sink.write_json("entropy.json", json!({ "run": run, "violations": sink.outcome.violations }))?;
    if cfg.wants(Format::Csv) {
        let mut buf = sink.csv_preamble().into_bytes();
        run.series.write_csv(&mut buf).map_err(|e| Failure::Config(e.to_string()))?;
        if let Some(n) = &run.norm_series {
            let mut rest = Vec::new();
            n.write_csv(&mut rest).map_err(|e| Failure::Config(e.to_string()))?;
            buf.extend(rest.splitn(2, |&b| b == b'\n').nth(1).unwrap_or_default());
        }
        sink.write("entropy.csv", buf)?;
    }
    let s = &run.series;
    let x_label = if s.picture == Picture::Forward { "t" } else { "tau" };
    let note = sink.note();
    let title = format!("Entropy rates ({}, {})", s.picture, s.plug_in);
    let plot = svg::Plot { title: &title, x_label, y_label: "rate (nats per unit time)", note: &note };
    let text = svg::lines(
        &plot,
        &[
            svg::Series { name: "intrinsic", xs: &s.times, ys: &s.intrinsic, err: Some(&s.stderr_intrinsic) },
            svg::Series { name: "exchange", xs: &s.times, ys: &s.exchange, err: Some(&s.stderr_exchange) },
            svg::Series { name: "system", xs: &s.times, ys: &s.system, err: Some(&s.stderr_system) },
        ],
    );
    sink.write_svg("entropy.svg", text)?;
    Ok((run, sink.outcome))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(TrainReport, Outcome), Failure> {
    let (proc, data) = setup(cfg)?;
    let tc = cfg.field.train.clone();
    let mut tr = match &cfg.field.resume {
        Some(p) => Trainer::resume(tc.clone(), read_checkpoint(p, &proc)?)?,
        None => Trainer::new(tc.clone(), &proc)?,
    };
    let start = tr.step;
    if let Err(e) = tr.run(&data, tc.steps) {
        if let Error::Diverged { step, loss } = e {
            eprintln!("training diverged at step {step} (loss {loss}); last finite step {}", step.saturating_sub(1));
        }
        return Err(e.into());
    }
    let ck = tr.checkpoint();
    let (_, report) = tr.finish(&data)?;
    let mut sink = Sink::open(cfg)?;
    sink.write("checkpoint.bin", ck.to_bytes())?;
    let rows: Vec<Vec<String>> = report.loss_curve.iter().map(|(s, l)| vec![s.to_string(), l.to_string()]).collect();
    sink.write_csv("loss.csv", &["step", "loss"], &rows)?;
    sink.write_json(
        "train.json",
        json!({
            "model": tc.model,
            "start_step": start,
            "steps": ck.step,
            "final_loss": report.final_loss,
            "loss_curve": report.loss_curve,
            "checkpoint": "checkpoint.bin",
        }),
    )?;
    if cfg.wants(Format::Svg) && !report.loss_curve.is_empty() {
        let xs: Vec<f64> = report.loss_curve.iter().map(|&(s, _)| s as f64).collect();
        let ys: Vec<f64> = report.loss_curve.iter().map(|&(_, l)| l).collect();
        let note = sink.note();
        let plot = svg::Plot { title: "DSM loss", x_label: "step", y_label: "batch loss", note: &note };
        sink.write_svg("loss.svg", svg::lines(&plot, &[svg::Series { name: "loss", xs: &xs, ys: &ys, err: None }]))?;
    }
    Ok((report, sink.outcome))
}

#[derive(Debug, Serialize)]
pub struct SampleSummary {
    pub paths: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<(SampleSummary, Outcome), Failure> {
    let (proc, data) = setup(cfg)?;
    let b = build_field(cfg, &proc, &data)?;
    let ens = reverse_sample(&proc, &b.field, cfg.sampler.paths, &cfg.sampler(), cfg.sampler.seed)?;
    let d = proc.dim;
    let mut moments = vec![Moments::new(); d];
    let mut rows = Vec::with_capacity(ens.paths);
    for p in 0..ens.paths {
        let x = ens.terminal(p);
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Failure::Numerical(format!("non-finite sample in path {p}, coordinate {i}")));
        }
        for (m, &v) in moments.iter_mut().zip(x) {
            m.push(v);
        }
        rows.push(x.iter().map(|v| v.to_string()).collect());
    }
    let summary = SampleSummary {
        paths: ens.paths,
        mean: moments.iter().map(|m| m.mean()).collect(),
        variance: moments.iter().map(|m| m.variance()).collect(),
    };
    let mut sink = Sink::open(cfg)?;
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    sink.write_csv("samples.csv", &header, &rows)?;
    if cfg.sampler.trajectories {
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).map_err(|e| Failure::Config(e.to_string()))?;
        sink.write("trajectories.bin", buf)?;
    }
    sink.write_json("sample.json", json!({ "summary": summary, "steps": cfg.sampler.steps }))?;
    if cfg.wants(Format::Svg) && d >= 2 {
        let xs: Vec<f64> = (0..ens.paths).map(|p| ens.terminal(p)[0]).collect();
        let ys: Vec<f64> = (0..ens.paths).map(|p| ens.terminal(p)[1]).collect();
        let note = sink.note();
        let plot = svg::Plot { title: "Terminal samples", x_label: "x0", y_label: "x1", note: &note };
        sink.write_svg("samples.svg", svg::scatter(&plot, &[svg::Series { name: "samples", xs: &xs, ys: &ys, err: None }]))?;
    }
    Ok((summary, sink.outcome))
}
