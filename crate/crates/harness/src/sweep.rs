use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thermo_diffusion::stats::{pearson, spearman};
use thermo_diffusion::{BoundReport, DataKind, DatasetSpec, ModelKind, ProcessKind};

use crate::commands::{bound_checks, bound_row, evaluate_bound, Sink};
use crate::config::{ExperimentConfig, FieldVariant};
use crate::outcome::{Failure, Outcome};
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "quality", rename_all = "kebab-case")]
pub enum Quality {
    Exact,
    Perturbed { epsilon: f64 },
    Trained { model: ModelKind, seed: u64 },
}

impl Quality {
    pub fn label(&self) -> String {
        match self {
            Quality::Exact => "exact".into(),
            Quality::Perturbed { epsilon } => format!("eps={epsilon}"),
            Quality::Trained { model, seed } => format!("{model} seed={seed}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub quality: Quality,
    pub config: ExperimentConfig,
}

/// Every cell of the cross product, in a fixed order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut qualities = Vec::new();
    for &e in &cfg.sweep.epsilons {
        qualities.push(if e == 0.0 { Quality::Exact } else { Quality::Perturbed { epsilon: e } });
    }
    for &model in &cfg.sweep.models {
        for &seed in &cfg.sweep.train_seeds {
            qualities.push(Quality::Trained { model, seed });
        }
    }
    let data: Vec<DatasetSpec<f64>> = if cfg.sweep.data.is_empty() { vec![cfg.data.clone()] } else { cfg.sweep.data.clone() };
    let mut out = Vec::new();
    for d in &data {
        for &kind in &cfg.sweep.processes {
            for &sigma in &cfg.sweep.sigmas {
                for &q in &qualities {
                    let mut c = cfg.clone();
                    c.data = d.clone();
                    c.process.kind = kind;
                    c.process.sigma = sigma;
                    c.process.dim = Some(d.dim());
                    c.field.perturbation = None;
                    c.field.checkpoint = None;
                    c.field.resume = None;
                    match q {
                        Quality::Exact => c.field.variant = FieldVariant::Exact,
                        Quality::Perturbed { epsilon } => {
                            c.field.variant = FieldVariant::Perturbed;
                            c.field.perturbation = Some(cfg.sweep_perturbation(epsilon));
                        }
                        Quality::Trained { model, seed } => {
                            c.field.variant = FieldVariant::Trained;
                            let t = &mut c.field.train;
                            if t.model != model {
                                t.model = model;
                                t.learning_rate = None;
                                t.optimizer = None;
                                t.schedule = None;
                            }
                            t.seed = seed;
                        }
                    }
                    c.materialize();
                    out.push(Cell { index: out.len(), quality: q, config: c });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub config_hash: String,
    pub sigma: f64,
    pub data: DataKind,
    pub process: ProcessKind,
    #[serde(flatten)]
    pub quality: Quality,
    /// `ok`, `unsupported` or `failed: …`.
    pub status: String,
    pub report: Option<BoundReport<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Correlation of nll with gap over the `ok` rows.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl SweepResult {
    pub fn ok_rows(&self) -> impl Iterator<Item = (&SweepRow, &BoundReport<f64>)> {
        self.rows.iter().filter_map(|r| r.report.as_ref().map(|b| (r, b)))
    }
}

fn evaluate_cell(c: &Cell) -> (SweepRow, bool) {
    let cfg = &c.config;
    let unsupported = cfg.process.kind == ProcessKind::Vp && !cfg.data.is_gaussian();
    let (status, report, numerical) = if unsupported {
        ("unsupported".to_string(), None, false)
    } else {
        match evaluate_bound(cfg) {
            Ok(r) => ("ok".to_string(), Some(r), false),
            Err(e) => (format!("failed: {e}"), None, matches!(e, Failure::Numerical(_))),
        }
    };
    let row = SweepRow {
        cell: c.index,
        config_hash: cfg.hash(),
        sigma: cfg.process.sigma,
        data: cfg.data.kind(),
        process: cfg.process.kind,
        quality: c.quality,
        status,
        report,
    };
    (row, numerical)
}

/// Evaluates every cell on the worker pool; rows come back in cell order.
pub fn run_sweep(cfg: &ExperimentConfig) -> (SweepResult, Vec<String>) {
    run_cells(&cells(cfg))
}

/// Like [`run_sweep`] for an explicit cell list.
pub fn run_cells(cells: &[Cell]) -> (SweepResult, Vec<String>) {
    let results: Vec<(SweepRow, bool)> = cells.par_iter().map(evaluate_cell).collect();
    let failed = results.iter().filter(|(_, n)| *n).map(|(r, _)| format!("cell {}: {}", r.cell, r.status)).collect();
    let rows: Vec<SweepRow> = results.into_iter().map(|(r, _)| r).collect();
    let (nll, gap): (Vec<f64>, Vec<f64>) =
        rows.iter().filter_map(|r| r.report.as_ref()).map(|b| (b.nll_ode.value, b.gap.value)).unzip();
    let result = SweepResult { pearson: pearson(&nll, &gap), spearman: spearman(&nll, &gap), rows };
    (result, failed)
}

pub fn describe(r: &SweepRow) -> String {
    format!("cell {} ({} {} sigma={} {})", r.cell, r.process, r.data, r.sigma, r.quality.label())
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(SweepResult, Outcome), Failure> {
    let (result, failed) = run_sweep(cfg);
    let mut sink = Sink::open(cfg)?;
    sink.outcome.numerical = failed;
    for (row, rep) in result.ok_rows() {
        for v in bound_checks(rep, cfg.estimation.tolerance) {
            sink.outcome.violations.push(format!("{}: {v}", describe(row)));
        }
    }
    sink.write_json("sweep.json", json!({ "sweep": result, "violations": sink.outcome.violations }))?;

    let mut header = vec!["cell", "status", "quality", "epsilon", "train_seed"];
    let mut report_cols: Vec<&str> = Vec::new();
    let mut rows = Vec::new();
    for r in &result.rows {
        let (eps, seed) = match r.quality {
            Quality::Exact => ("0".to_string(), String::new()),
            Quality::Perturbed { epsilon } => (epsilon.to_string(), String::new()),
            Quality::Trained { seed, .. } => (String::new(), seed.to_string()),
        };
        let quality = match r.quality {
            Quality::Trained { model, .. } => model.to_string(),
            Quality::Exact => "exact".into(),
            Quality::Perturbed { .. } => "perturbed".into(),
        };
        let mut row = vec![r.cell.to_string(), r.status.clone(), quality, eps, seed];
        match &r.report {
            Some(b) => {
                let (h, v) = bound_row(b);
                report_cols = h;
                row.extend(v);
            }
            None => row.extend([r.config_hash.clone(), r.process.to_string(), r.sigma.to_string(), r.data.to_string()]),
        }
        rows.push(row);
    }
    if report_cols.is_empty() {
        report_cols = vec!["config_hash", "process", "sigma", "data"];
    }
    header.extend(report_cols.iter().copied());
    for row in &mut rows {
        row.resize(header.len(), String::new());
    }
    sink.write_csv("sweep.csv", &header, &rows)?;

    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for (row, b) in result.ok_rows() {
        let name = format!("{} {}", row.process, row.data);
        let g = match groups.iter().position(|g| g.0 == name) {
            Some(i) => &mut groups[i],
            None => {
                groups.push((name, Vec::new(), Vec::new()));
                groups.last_mut().expect("pushed")
            }
        };
        g.1.push(b.bound.value);
        g.2.push(b.nll_ode.value);
    }
    let series: Vec<svg::Series> =
        groups.iter().map(|(n, x, y)| svg::Series { name: n, xs: x, ys: y, err: None }).collect();
    let note = format!(
        "{} pearson(nll,gap)={:?} spearman(nll,gap)={:?}",
        sink.note(),
        result.pearson,
        result.spearman
    );
    let plot = svg::Plot { title: "NLL versus lower bound", x_label: "bound (nats)", y_label: "NLL (nats)", note: &note };
    sink.write_svg("sweep.svg", svg::scatter(&plot, &series))?;
    Ok((result, sink.outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_order_and_count() {
        let mut c = ExperimentConfig::default();
        c.sweep.sigmas = vec![10.0, 20.0];
        c.sweep.data = vec![DatasetSpec::standard_gaussian(2), DatasetSpec::uniform(2)];
        c.sweep.train_seeds = vec![0, 1];
        c.materialize();
        let cs = cells(&c);
        // 2 data × 2 processes × 2 σ × (5 ε + 2 models × 2 seeds)
        assert_eq!(cs.len(), 2 * 2 * 2 * 9);
        assert!(cs.iter().enumerate().all(|(i, c)| c.index == i));
        assert_eq!(cs[0].quality, Quality::Exact);
        assert_eq!(cs[1].config.field.perturbation.map(|p| p.epsilon), Some(0.05));
        let ff = cs.iter().find(|c| matches!(c.quality, Quality::Trained { model: ModelKind::FeedForward, .. })).unwrap();
        assert_eq!(ff.config.field.train.learning_rate, Some(3e-3));
        for c in &cs {
            c.config.validate().unwrap();
        }
    }
}
