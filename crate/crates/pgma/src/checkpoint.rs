//! The PGMC checkpoint container.
//!
//! ```text
//! "PGMC" | u32 version | u32 len | metadata JSON | u64 step | u32 count
//! count × (u16 len | name | u8 rank | u32 dims × rank | f32 data)
//! u8 has_optimizer
//! [ f64 lr, beta1, beta2, eps, weight_decay | u64 t | count × m | count × v ]
//! ```
//!
//! Everything is little-endian; moment tensors reuse their parameter's shape.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use pgma_core::model::{Geometry, Model};
use pgma_core::optim::{AdamWConfig, AdamWState};
use pgma_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: [u8; 4] = *b"PGMC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a PGMC checkpoint (magic {0:?})")]
    MagicMismatch([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint does not match its model: {0}")]
    Model(#[from] pgma_core::Error),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to rebuild the model, plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    /// The resolved configuration of the run that wrote the checkpoint.
    pub run: RunConfig,
    pub config_hash: String,
    pub geometry: Geometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    /// Completed training steps.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub opt: Option<AdamWState<f32>>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model<f32>> {
        Ok(Model::from_params(self.meta.run.model.clone(), self.meta.geometry.clone(), self.params.clone())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&self.meta)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (_, name, t) in self.params.iter() {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_f32s(w, t.data())?;
        }
        match &self.opt {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                let c = o.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&o.step.to_le_bytes())?;
                for t in o.m.iter().chain(&o.v) {
                    write_f32s(w, t.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let magic: [u8; 4] = array(r)?;
        if magic != MAGIC {
            return Err(CheckpointError::MagicMismatch(magic));
        }
        let version = u32::from_le_bytes(array(r)?);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = u32::from_le_bytes(array(r)?) as usize;
        let json = bytes(r, len)?;
        let meta: Meta = serde_json::from_slice(&json)?;
        let step = u64::from_le_bytes(array(r)?);
        let count = u32::from_le_bytes(array(r)?) as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(array(r)?) as usize;
            let name = bytes(r, len)?;
            let name = String::from_utf8(name).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "parameter name is not UTF-8"))?;
            let rank = array::<1, _>(r)?[0] as usize;
            let dims = (0..rank).map(|_| array(r).map(|b| u32::from_le_bytes(b) as usize)).collect::<io::Result<Vec<_>>>()?;
            let n = dims.iter().product();
            params.insert(name, Tensor::new(dims, read_f32s(r, n)?)?)?;
        }
        let opt = match array::<1, _>(r)?[0] {
            0 => None,
            _ => {
                let mut f = [0.0; 5];
                for v in &mut f {
                    *v = f64::from_le_bytes(array(r)?);
                }
                let config = AdamWConfig { lr: f[0], beta1: f[1], beta2: f[2], eps: f[3], weight_decay: f[4] };
                let t = u64::from_le_bytes(array(r)?);
                let moments = |r: &mut R| -> Result<Vec<Tensor<f32>>> {
                    params.iter().map(|(_, _, p)| Ok(Tensor::new(p.shape().to_vec(), read_f32s(r, p.len())?)?)).collect()
                };
                let m = moments(r)?;
                let v = moments(r)?;
                Some(AdamWState { config, step: t, m, v })
            }
        };
        Ok(Self { meta, step, params, opt })
    }
}

fn array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    w.write_all(&buf)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f32>> {
    Ok(bytes(r, n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}
