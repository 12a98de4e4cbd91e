use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thermo_harness::commands::{cmd_bound, cmd_entropy, cmd_sample, cmd_train};
use thermo_harness::sweep::cmd_sweep;
use thermo_harness::{ExperimentConfig, Failure, Format, Outcome, Overrides, Stage};

/// Entropy-rate bounds on diffusion-model likelihood.
///
/// Exit codes: 0 pass, 2 config error, 3 numerical failure, 4 invariant violation.
#[derive(Parser)]
#[command(name = "thermolab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// NLL, lower bound and gap for one field.
    Bound,
    /// Entropy-rate curves and their totals.
    Entropy,
    /// Bound over the cross product of the sweep block.
    Sweep,
    /// Train a score model and write a checkpoint.
    Train,
    /// Reverse-time samples from the configured field.
    Sample,
}

#[derive(Args)]
struct Flags {
    /// TOML experiment file; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of the command's main stage (estimation, training or sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Batch of the command's main stage (estimation, training or sample paths).
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    ode_steps: Option<usize>,
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    format: Vec<Format>,
}

fn run(cli: Cli) -> Result<Outcome, Failure> {
    let mut cfg = match &cli.flags.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let f = &cli.flags;
    let o = Overrides {
        out: f.out.clone(),
        seed: f.seed,
        grid: f.grid,
        batch: f.batch,
        ode_steps: f.ode_steps,
        formats: f.format.clone(),
    };
    let stage = match cli.cmd {
        Cmd::Train => Stage::Train,
        Cmd::Sample => Stage::Sample,
        _ => Stage::Estimate,
    };
    cfg.apply(&o, stage);
    cfg.materialize();
    cfg.validate()?;
    let outcome = match cli.cmd {
        Cmd::Bound => {
            let (r, o) = cmd_bound(&cfg)?;
            println!(
                "nll {:.6} ± {:.6}  bound {:.6} ± {:.6}  gap {:.6} ± {:.6}",
                r.nll_ode.value, r.nll_ode.stderr, r.bound.value, r.bound.stderr, r.gap.value, r.gap.stderr
            );
            o
        }
        Cmd::Entropy => {
            let (r, o) = cmd_entropy(&cfg)?;
            if let Some(t) = r.total_system {
                println!("entropy removed {:.6} ± {:.6}", -t.value, t.stderr);
            }
            o
        }
        Cmd::Sweep => {
            let (r, o) = cmd_sweep(&cfg)?;
            let ok = r.ok_rows().count();
            println!("{ok} of {} cells evaluated; spearman(nll, gap) {:?}", r.rows.len(), r.spearman);
            o
        }
        Cmd::Train => {
            let (r, o) = cmd_train(&cfg)?;
            println!("final loss {:.6}", r.final_loss);
            o
        }
        Cmd::Sample => {
            let (r, o) = cmd_sample(&cfg)?;
            println!("mean {:?} variance {:?}", r.mean, r.variance);
            o
        }
    };
    for p in &outcome.artifacts {
        eprintln!("wrote {}", p.display());
    }
    for v in outcome.violations.iter().chain(&outcome.numerical) {
        eprintln!("thermolab: {v}");
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(o) => ExitCode::from(o.exit_code()),
        Err(e) => {
            eprintln!("thermolab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
