//! Binary checkpoint container.
//!
//! Little-endian layout: magic `GMFF`, format version `u32`, tensor count
//! `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` dimensions as `u32` and the row-major `f32` payload. Run metadata is
//! stored as JSON bytes in a rank-1 tensor named `meta.snapshot`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{FeatureScaler, WindowPlan};
use super::train::TrainConfig;
use crate::model::{BranchMask, GaitModel, ModelError, build_model};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"GMFF";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_PREFIX: &str = "meta.";
const SNAPSHOT: &str = "meta.snapshot";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name `{0}` appears twice")]
    NameCollision(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no run metadata")]
    MissingMeta,
    #[error("parameter set does not match the recorded model: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Everything needed to rebuild and use the trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    pub train_loss: f64,
    pub mask: BranchMask,
    /// Class index → subject id.
    pub subjects: Vec<String>,
    pub plan: WindowPlan,
    pub scaler: Option<FeatureScaler>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    /// `None` only for bare tensor containers.
    pub meta: Option<CheckpointMeta>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(params: &ParamStore<T>, meta: CheckpointMeta) -> Result<Self> {
        let mut store = ParamStore::new();
        for p in params.iter() {
            store.insert(p.name.clone(), p.tensor.cast())?;
        }
        Ok(Self {
            params: store,
            meta: Some(meta),
        })
    }

    pub fn meta(&self) -> Result<&CheckpointMeta> {
        self.meta.as_ref().ok_or(CheckpointError::MissingMeta)
    }

    /// Rebuilds the model and loads the stored parameters into a fresh store.
    /// The stored names must match the architecture exactly.
    pub fn instantiate<T: Scalar>(&self) -> Result<(GaitModel, ParamStore<T>)> {
        let meta = self.meta()?;
        let mut store = ParamStore::<T>::new();
        let model = build_model(
            &meta.config.model,
            meta.mask,
            meta.subjects.len(),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let expected: BTreeSet<&str> = store.names().collect();
        let found: BTreeSet<&str> = self.params.names().collect();
        if expected != found {
            let missing: Vec<_> = expected.difference(&found).take(3).collect();
            let extra: Vec<_> = found.difference(&expected).take(3).collect();
            return Err(CheckpointError::ParamMismatch(format!(
                "missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for p in self.params.iter() {
            store
                .assign(&p.name, p.tensor.cast())
                .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        }
        Ok((model, store))
    }

    fn tensors(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        if let Some(meta) = &self.meta {
            let json =
                serde_json::to_vec(meta).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let bytes: Vec<f32> = json.into_iter().map(f32::from).collect();
            out.push((SNAPSHOT.to_string(), Tensor::new(&[bytes.len()], bytes)?));
        }
        Ok(out)
    }

    fn from_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut meta = None;
        for (name, tensor) in tensors {
            if name == SNAPSHOT {
                let bytes = tensor
                    .data()
                    .iter()
                    .map(|&v| {
                        (v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                            .then_some(v as u8)
                            .ok_or_else(|| {
                                CheckpointError::Malformed("metadata is not a byte string".into())
                            })
                    })
                    .collect::<Result<Vec<u8>>>()?;
                meta = Some(
                    serde_json::from_slice(&bytes)
                        .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
                );
            } else if name.starts_with(META_PREFIX) {
                return Err(CheckpointError::Malformed(format!(
                    "unknown metadata tensor `{name}`"
                )));
            } else {
                params.insert(name, tensor)?;
            }
        }
        Ok(Self { params, meta })
    }
}

/// Writes named tensors in the container format.
pub fn write_tensors(mut w: impl Write, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut seen = BTreeSet::new();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::NameCollision(name.clone()));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| CheckpointError::Malformed(format!("{name}: rank too large")))?;
        w.write_all(&[rank])?;
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| CheckpointError::Malformed(format!("{name}: dimension too large")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })?;
    Ok(buf)
}

/// Reads a container written by [`write_tensors`]. Trailing bytes are an error.
pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let magic = read_exact::<4>(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "tensor count")?) as usize;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Truncated("name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::NameCollision(name));
        }
        let [rank] = read_exact::<1>(&mut r, "rank")?;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_exact(&mut r, "dimensions")?) as usize))
            .collect::<Result<Vec<usize>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflows")))?;
        let mut payload = Vec::new();
        r.by_ref()
            .take(4 * numel as u64)
            .read_to_end(&mut payload)?;
        if payload.len() != 4 * numel {
            return Err(CheckpointError::Truncated("payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(out)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &ckpt.tensors()?)?;
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    Checkpoint::from_tensors(read_tensors(bytes)?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
