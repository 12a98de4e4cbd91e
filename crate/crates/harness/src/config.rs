use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thermo_diffusion::likelihood::StepSchedule;
use thermo_diffusion::{
    BoundConfig, DatasetSpec, DiffusionProcess, GridSpacing, Hutchinson, ModelKind, OdeConfig, PerturbationMode,
    PerturbationSpec, Picture, PlugIn, PriorVariance, Process, ProcessKind, RateConfig, SamplerConfig, SamplingMode,
    TrainConfig,
};

use crate::outcome::Failure;

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub process: ProcessBlock,
    pub data: DatasetSpec<f64>,
    pub field: FieldBlock,
    pub estimation: EstimationBlock,
    pub entropy: EntropyBlock,
    pub sampler: SamplerBlock,
    pub sweep: SweepBlock,
    pub output: OutputBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            process: ProcessBlock::default(),
            data: DatasetSpec::standard_gaussian(2),
            field: FieldBlock::default(),
            estimation: EstimationBlock::default(),
            entropy: EntropyBlock::default(),
            sampler: SamplerBlock::default(),
            sweep: SweepBlock::default(),
            output: OutputBlock::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessBlock {
    pub kind: ProcessKind,
    pub sigma: f64,
    pub r: f64,
    /// Taken from the data block when absent.
    pub dim: Option<usize>,
    pub prior: PriorVariance,
}

impl Default for ProcessBlock {
    fn default() -> Self {
        Self { kind: ProcessKind::Ve, sigma: 10.0, r: 0.5, dim: None, prior: PriorVariance::Integrated }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldVariant {
    #[default]
    Exact,
    Zero,
    /// The exact field plus `perturbation`.
    Perturbed,
    /// Trained in-process from `train`.
    Trained,
    /// Loaded from `checkpoint`.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldBlock {
    pub variant: FieldVariant,
    pub perturbation: Option<PerturbationSpec>,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue from in `train`.
    pub resume: Option<PathBuf>,
}

impl Default for FieldBlock {
    fn default() -> Self {
        Self { variant: FieldVariant::Exact, perturbation: None, train: TrainConfig::default(), checkpoint: None, resume: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationBlock {
    pub grid_points: usize,
    pub spacing: GridSpacing,
    pub batch: usize,
    /// ODE likelihood trajectories; `0` means `batch`.
    pub nll_batch: usize,
    pub ode_steps: usize,
    pub ode_schedule: StepSchedule,
    pub hutchinson_probes: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
    /// Checks pass within this many standard errors.
    pub tolerance: f64,
}

impl Default for EstimationBlock {
    fn default() -> Self {
        let b = BoundConfig::default();
        Self {
            grid_points: b.grid_points,
            spacing: b.spacing,
            batch: b.batch,
            nll_batch: 0,
            ode_steps: b.ode.steps,
            ode_schedule: b.ode.schedule,
            hutchinson_probes: b.ode.hutchinson.probes,
            seed: 0,
            sampling: b.sampling,
            tolerance: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyBlock {
    pub picture: Picture,
    pub plug_in: PlugIn,
    pub substeps: usize,
}

impl Default for EntropyBlock {
    fn default() -> Self {
        Self { picture: Picture::ControlledForward, plug_in: PlugIn::DivergenceBased, substeps: RateConfig::default().substeps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerBlock {
    pub paths: usize,
    pub steps: usize,
    /// Keep every this many states; equal to `steps` keeps only the ends.
    pub record_every: usize,
    pub denoise_last: bool,
    pub seed: u64,
    /// Also write the recorded states in the binary ensemble format.
    pub trajectories: bool,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self { paths: 1024, steps: s.steps, record_every: s.steps, denoise_last: false, seed: 0, trajectories: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub sigmas: Vec<f64>,
    pub processes: Vec<ProcessKind>,
    /// Data sets to cross; the top-level data block when empty.
    pub data: Vec<DatasetSpec<f64>>,
    /// `0` is the exact field, the rest are additive perturbations.
    pub epsilons: Vec<f64>,
    pub perturbation_seed: u64,
    pub models: Vec<ModelKind>,
    pub train_seeds: Vec<u64>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            sigmas: vec![10.0, 15.0, 20.0, 25.0, 30.0],
            processes: vec![ProcessKind::Ve, ProcessKind::Vp],
            data: Vec::new(),
            epsilons: vec![0.0, 0.05, 0.1, 0.2, 0.3],
            perturbation_seed: 1,
            models: vec![ModelKind::Linear, ModelKind::FeedForward],
            train_seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json, Format::Svg] }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid: Option<usize>,
    pub batch: Option<usize>,
    pub ode_steps: Option<usize>,
    pub formats: Vec<Format>,
}

/// Which stage a `--seed` or `--batch` override lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Estimate,
    Train,
    Sample,
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &Overrides, stage: Stage) {
        if let Some(dir) = &o.out {
            self.output.dir = dir.clone();
        }
        if let Some(g) = o.grid {
            self.estimation.grid_points = g;
        }
        if let Some(n) = o.ode_steps {
            self.estimation.ode_steps = n;
        }
        if !o.formats.is_empty() {
            self.output.formats = o.formats.clone();
        }
        match stage {
            Stage::Estimate => {
                if let Some(s) = o.seed {
                    self.estimation.seed = s;
                }
                if let Some(b) = o.batch {
                    self.estimation.batch = b;
                }
            }
            Stage::Train => {
                if let Some(s) = o.seed {
                    self.field.train.seed = s;
                }
                if let Some(b) = o.batch {
                    self.field.train.batch = b;
                }
            }
            Stage::Sample => {
                if let Some(s) = o.seed {
                    self.sampler.seed = s;
                }
                if let Some(b) = o.batch {
                    self.sampler.paths = b;
                }
            }
        }
    }

    /// Fills every defaulted entry with the value it resolves to.
    pub fn materialize(&mut self) {
        self.process.dim.get_or_insert(self.data.dim());
        if self.estimation.nll_batch == 0 {
            self.estimation.nll_batch = self.estimation.batch;
        }
        let t = &mut self.field.train;
        t.learning_rate = Some(t.learning_rate());
        t.optimizer = Some(t.optimizer());
        t.schedule = Some(t.schedule());
        if self.sweep.data.is_empty() {
            self.sweep.data.push(self.data.clone());
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let proc = self.process()?;
        if proc.dim != self.data.dim() {
            return Err(Failure::Config(format!(
                "process dimension {} does not match data dimension {}",
                proc.dim,
                self.data.dim()
            )));
        }
        self.data.prepare().map_err(config_err)?;
        self.field.train.validate().map_err(config_err)?;
        self.ode().validate().map_err(config_err)?;
        self.sampler().validate().map_err(config_err)?;
        if self.estimation.grid_points < 2 {
            return Err(Failure::Config("estimation.grid_points must be at least 2".into()));
        }
        if self.estimation.batch == 0 || self.estimation.hutchinson_probes == 0 || self.entropy.substeps == 0 {
            return Err(Failure::Config("batch, probe and substep counts must be positive".into()));
        }
        if self.estimation.tolerance.is_nan() || self.estimation.tolerance <= 0.0 {
            return Err(Failure::Config("estimation.tolerance must be positive".into()));
        }
        let seeds = self.seeds().into_values().chain(self.sweep.train_seeds.iter().copied());
        if seeds.into_iter().any(|s| s > i64::MAX as u64) {
            return Err(Failure::Config(format!("seeds must not exceed {}", i64::MAX)));
        }
        match self.field.variant {
            FieldVariant::Perturbed => match self.field.perturbation {
                Some(p) => p.validate().map_err(config_err)?,
                None => return Err(Failure::Config("field.variant = \"perturbed\" needs field.perturbation".into())),
            },
            _ if self.field.perturbation.is_some() => {
                return Err(Failure::Config("field.perturbation is only read for the perturbed variant".into()))
            }
            FieldVariant::Checkpoint if self.field.checkpoint.is_none() => {
                return Err(Failure::Config("field.variant = \"checkpoint\" needs field.checkpoint".into()))
            }
            _ => {}
        }
        for p in self.field.checkpoint.iter().chain(&self.field.resume) {
            if !p.is_file() {
                return Err(Failure::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        for &s in &self.sweep.sigmas {
            for &k in &self.sweep.processes {
                DiffusionProcess::new(k, s, self.process.r, 1).map_err(config_err)?;
            }
        }
        for d in &self.sweep.data {
            d.prepare().map_err(config_err)?;
        }
        if self.sweep.epsilons.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Failure::Config("sweep.epsilons must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn process(&self) -> Result<Process, Failure> {
        let dim = self.process.dim.unwrap_or(self.data.dim());
        let mut p = DiffusionProcess::new(self.process.kind, self.process.sigma, self.process.r, dim).map_err(config_err)?;
        p.prior = self.process.prior;
        Ok(p)
    }

    pub fn ode(&self) -> OdeConfig {
        OdeConfig {
            steps: self.estimation.ode_steps,
            schedule: self.estimation.ode_schedule,
            hutchinson: self.hutchinson(),
            ..OdeConfig::default()
        }
    }

    pub fn hutchinson(&self) -> Hutchinson {
        Hutchinson { probes: self.estimation.hutchinson_probes, seed: self.estimation.seed, ..Hutchinson::default() }
    }

    pub fn bound(&self) -> BoundConfig {
        let e = &self.estimation;
        BoundConfig {
            grid_points: e.grid_points,
            spacing: e.spacing,
            batch: e.batch,
            nll_batch: e.nll_batch,
            ode: self.ode(),
            seed: e.seed,
            sampling: e.sampling,
        }
    }

    pub fn rates(&self) -> RateConfig {
        RateConfig {
            batch: self.estimation.batch,
            seed: self.estimation.seed,
            hutchinson: self.hutchinson(),
            substeps: self.entropy.substeps,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            record_every: self.sampler.record_every,
            denoise_last: self.sampler.denoise_last,
            ..SamplerConfig::default()
        }
    }

    /// SHA-256 of the materialised config, output block excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputBlock::default();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> BTreeMap<&'static str, u64> {
        let mut m = BTreeMap::new();
        m.insert("estimation", self.estimation.seed);
        m.insert("train", self.field.train.seed);
        m.insert("sampler", self.sampler.seed);
        if let Some(p) = self.field.perturbation {
            m.insert("perturbation", p.seed);
        }
        m.insert("sweep_perturbation", self.sweep.perturbation_seed);
        m
    }

    /// Perturbation used for an ε cell of a sweep.
    pub fn sweep_perturbation(&self, epsilon: f64) -> PerturbationSpec {
        PerturbationSpec { epsilon, mode: PerturbationMode::AdditiveNoiseField, seed: self.sweep.perturbation_seed }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn materialized_copy_reads_back_unchanged() {
        let mut c = ExperimentConfig::from_toml(
            r#"
            [process]
            kind = "vp"
            sigma = 20.0
            [data]
            kind = "gaussian-full"
            mean = [0.5, -0.3]
            covariance = [[1.0, 0.3], [0.3, 0.5]]
            [field]
            variant = "perturbed"
            perturbation = { epsilon = 0.2, seed = 3 }
            "#,
        )
        .unwrap();
        c.materialize();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.process.dim, Some(2));
        assert_eq!(back.estimation.nll_batch, back.estimation.batch);
    }

    #[test]
    fn hash_ignores_output_but_not_seeds() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.estimation.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml("[process]\nsigmaa = 3.0").is_err());
        let c = ExperimentConfig::from_toml("[process]\nsigma = 0.5").unwrap();
        assert!(matches!(c.validate(), Err(Failure::Config(_))));
        let c = ExperimentConfig::from_toml("[field]\nvariant = \"perturbed\"").unwrap();
        assert!(matches!(c.validate(), Err(Failure::Config(_))));
        let c = ExperimentConfig::from_toml("[field]\nvariant = \"checkpoint\"\ncheckpoint = \"/nonexistent/ck.bin\"").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("/nonexistent/ck.bin"), "{msg}");
    }

    #[test]
    fn overrides_follow_the_stage() {
        let o = Overrides { seed: Some(9), batch: Some(33), ..Overrides::default() };
        let mut c = ExperimentConfig::default();
        c.apply(&o, Stage::Train);
        assert_eq!((c.field.train.seed, c.field.train.batch), (9, 33));
        assert_eq!(c.estimation.seed, 0);
        c.apply(&o, Stage::Sample);
        assert_eq!((c.sampler.seed, c.sampler.paths), (9, 33));
    }
}
