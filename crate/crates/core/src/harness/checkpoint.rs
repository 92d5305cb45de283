//! Binary checkpoints: `SPBK`, a format version, a JSON metadata blob and a
//! table of named `f32` tensors, all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::{DrafterConfig, DrafterModel, ParamGroup, ParamSet, TargetConfig, TargetModel};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPBK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Target(TargetConfig),
    Drafter(DrafterConfig),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Blocks per draft tree the drafter was trained for (0 for a target).
    pub max_blocks: usize,
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn tensors_of(params: &ParamSet) -> Result<Vec<(String, Tensor)>> {
    params
        .iter()
        .map(|(_, name, _, t)| {
            if t.data().iter().any(|&x| f64::from(x as f32) != x) {
                return Err(bad(format!("tensor {name} holds values that are not exact f32")));
            }
            Ok((name.to_string(), t.clone()))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_target(target: &TargetModel, seed: u64, step: u64) -> Result<Self> {
        let meta = CheckpointMeta { model: ModelSpec::Target(target.config.clone()), max_blocks: 0, seed, step };
        Ok(Self { meta, tensors: tensors_of(&target.params)? })
    }

    pub fn from_drafter(drafter: &DrafterModel, max_blocks: usize, seed: u64, step: u64) -> Result<Self> {
        let meta = CheckpointMeta { model: ModelSpec::Drafter(drafter.config.clone()), max_blocks, seed, step };
        Ok(Self { meta, tensors: tensors_of(&drafter.params)? })
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, t) in &self.tensors {
            p.add(name.clone(), ParamGroup::Trunk, t.clone());
        }
        p
    }

    pub fn to_target(&self) -> Result<TargetModel> {
        match &self.meta.model {
            ModelSpec::Target(cfg) => TargetModel::from_params(cfg.clone(), &self.params()),
            ModelSpec::Drafter(_) => Err(bad("expected a target checkpoint, found a drafter")),
        }
    }

    pub fn to_drafter(&self) -> Result<DrafterModel> {
        match &self.meta.model {
            ModelSpec::Drafter(cfg) => DrafterModel::from_params(cfg.clone(), &self.params()),
            ModelSpec::Target(_) => Err(bad("expected a drafter checkpoint, found a target")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| bad("length does not fit in 32 bits"))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("file is truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
