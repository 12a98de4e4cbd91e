//! Binary weight format for trainable score fields.
//!
//! Layout (little-endian): magic `DTSF`, version `u32`, model kind `u32`,
//! dimension count `u32` and that many `u64` dims, process kind `u32`,
//! σ `f64`, r `f64`, prior `u32`, step `u64`, coefficient count `u64` and
//! `f64` coefficients, optimizer-state count `u64` and `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, FeedForwardScore, LinearScore, ModelKind, Trainable};
use crate::process::{DiffusionProcess, PriorVariance, ProcessKind};
use crate::scalar::Real;
use crate::score::ScoreField;

pub const MAGIC: [u8; 4] = *b"DTSF";
pub const VERSION: u32 = 1;

/// A trainable model of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainableModel<T> {
    Linear(LinearScore<T>),
    FeedForward(FeedForwardScore<T>),
}

impl<T: Real> TrainableModel<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainableModel::Linear(_) => ModelKind::Linear,
            TrainableModel::FeedForward(_) => ModelKind::FeedForward,
        }
    }

    pub fn process(&self) -> &DiffusionProcess<T> {
        match self {
            TrainableModel::Linear(m) => &m.proc,
            TrainableModel::FeedForward(m) => &m.proc,
        }
    }

    pub fn into_field(self) -> ScoreField<T> {
        match self {
            TrainableModel::Linear(m) => ScoreField::Linear(m),
            TrainableModel::FeedForward(m) => ScoreField::FeedForward(m),
        }
    }

    pub fn to_field(&self) -> ScoreField<T> {
        self.clone().into_field()
    }

    fn dims(&self) -> Vec<u64> {
        match self {
            TrainableModel::Linear(m) => vec![m.proc.dim as u64, m.knots as u64],
            TrainableModel::FeedForward(m) => {
                let mut v = vec![m.proc.dim as u64, m.arch.time_embedding_size as u64];
                v.extend(m.arch.hidden_sizes.iter().map(|&h| h as u64));
                v
            }
        }
    }
}

impl<T: Real> Trainable<T> for TrainableModel<T> {
    fn params(&self) -> &[T] {
        match self {
            TrainableModel::Linear(m) => m.params(),
            TrainableModel::FeedForward(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [T] {
        match self {
            TrainableModel::Linear(m) => m.params_mut(),
            TrainableModel::FeedForward(m) => m.params_mut(),
        }
    }

    fn forward(&self, x: &[T], t: T, out: &mut [T]) {
        match self {
            TrainableModel::Linear(m) => m.forward(x, t, out),
            TrainableModel::FeedForward(m) => m.forward(x, t, out),
        }
    }

    fn accumulate_gradient(&self, x: &[T], t: T, target: &[T], weight: T, grad: &mut [T]) -> T {
        match self {
            TrainableModel::Linear(m) => m.accumulate_gradient(x, t, target, weight, grad),
            TrainableModel::FeedForward(m) => m.accumulate_gradient(x, t, target, weight, grad),
        }
    }
}

/// Model weights plus the optimizer position needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: TrainableModel<T>,
    pub step: u64,
    pub optimizer_state: Vec<T>,
}

fn kind_code(k: ModelKind) -> u32 {
    match k {
        ModelKind::Linear => 0,
        ModelKind::FeedForward => 1,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()?;
        if n as usize > limit {
            return Err(Error::Checkpoint(format!("length {n} exceeds remaining data")));
        }
        Ok(n as usize)
    }

    fn f64s<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.len((self.buf.len() - self.pos) / 8)?;
        (0..n).map(|_| self.f64().map(T::lit)).collect()
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&kind_code(self.model.kind()).to_le_bytes());
        let dims = self.model.dims();
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        let p = self.model.process();
        let pk: u32 = if p.is_ve() { 0 } else { 1 };
        b.extend_from_slice(&pk.to_le_bytes());
        b.extend_from_slice(&p.sigma.as_f64().to_le_bytes());
        b.extend_from_slice(&p.r.as_f64().to_le_bytes());
        let prior: u32 = match p.prior {
            PriorVariance::Integrated => 0,
            PriorVariance::HalfSquare => 1,
        };
        b.extend_from_slice(&prior.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        for block in [self.model.params(), &self.optimizer_state[..]] {
            b.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for v in block {
                b.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.u32()?;
        let ndims = r.u32()? as usize;
        if ndims > 64 {
            return Err(Error::Checkpoint(format!("implausible dimension count {ndims}")));
        }
        let dims: Vec<usize> = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let pkind = match r.u32()? {
            0 => ProcessKind::Ve,
            1 => ProcessKind::Vp,
            k => return Err(Error::Checkpoint(format!("unknown process kind {k}"))),
        };
        let sigma = T::lit(r.f64()?);
        let ratio = T::lit(r.f64()?);
        let prior = match r.u32()? {
            0 => PriorVariance::Integrated,
            1 => PriorVariance::HalfSquare,
            k => return Err(Error::Checkpoint(format!("unknown prior code {k}"))),
        };
        let step = r.u64()?;
        let coeffs = r.f64s()?;
        let optimizer_state = r.f64s()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let dim = *dims.first().ok_or_else(|| Error::Checkpoint("missing dimensions".into()))?;
        let proc = DiffusionProcess::new(pkind, sigma, ratio, dim)
            .map_err(|e| Error::Checkpoint(format!("invalid process: {e}")))?
            .with_prior(prior);
        let bad = |e: Error| Error::Checkpoint(format!("inconsistent model: {e}"));
        let model = match (kind, dims.as_slice()) {
            (0, [_, knots]) => TrainableModel::Linear(LinearScore::from_params(proc, *knots, coeffs).map_err(bad)?),
            (1, [_, emb, hidden @ ..]) => {
                let arch = Architecture { hidden_sizes: hidden.to_vec(), time_embedding_size: *emb };
                TrainableModel::FeedForward(FeedForwardScore::from_params(proc, arch, coeffs).map_err(bad)?)
            }
            _ => return Err(Error::Checkpoint(format!("unknown model kind {kind} with {} dims", dims.len()))),
        };
        Ok(Self { model, step, optimizer_state })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Reads a checkpoint; format errors name the file.
    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
