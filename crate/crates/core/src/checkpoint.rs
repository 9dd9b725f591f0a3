//! Binary checkpoints.
//!
//! Layout: magic `BGRTO\0`, format version (u32 LE), metadata length (u32 LE)
//! and UTF-8 JSON metadata, then per tensor: name length (u32 LE), name
//! bytes, rank (u32 LE), dims (u64 LE each), values (f64 LE each). The
//! metadata records the tensor count so a cut at a tensor boundary is caught.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{NamedParams, Tensor};
use crate::rollout::atomic_write;

pub const MAGIC: &[u8; 6] = b"BGRTO\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub mode: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Validation metric at this epoch, when one was measured.
    #[serde(default)]
    pub metric: Option<f64>,
    /// Filled in on save.
    #[serde(default)]
    pub tensors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: NamedParams,
}

impl Checkpoint {
    pub fn policy_params(&self) -> NamedParams {
        self.params.with_prefix("policy.")
    }

    pub fn tool_params(&self) -> NamedParams {
        self.params.with_prefix("tool.")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&CheckpointMeta { tensors: self.params.len(), ..self.meta.clone() })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(path, "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("checkpoint version {version} but this build reads {VERSION}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        let mut params = NamedParams::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format(path, "dims overflow"))?;
            if n > (bytes.len() - r.pos) / 8 {
                return Err(Error::format(path, format!("truncated tensor `{name}`")));
            }
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(dims, values).map_err(|e| Error::format(path, e.to_string()))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::format(path, format!("duplicate tensor `{name}`")));
            }
        }
        if params.len() != meta.tensors {
            return Err(Error::format(path, format!("{} tensors present, metadata says {}", params.len(), meta.tensors)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    /// Loads a checkpoint, rejecting it if `config_hash` is given and differs.
    pub fn load(path: &Path, config_hash: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes, path)?;
        if let Some(h) = config_hash {
            if ckpt.meta.config_hash != h {
                return Err(Error::format(path, format!("config hash {} in checkpoint but run config hashes to {h}", ckpt.meta.config_hash)));
            }
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::models::{PolicyConfig, PolicyNet};

    fn sample() -> Checkpoint {
        let policy = PolicyNet::new(&EnvConfig::default(), &PolicyConfig::default());
        Checkpoint {
            meta: CheckpointMeta { mode: "grpo".into(), epoch: 3, seed: 9, config_hash: "abc".into(), metric: Some(0.25), tensors: 0 },
            params: policy.init(4),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p, Some("abc")).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.meta, CheckpointMeta { tensors: c.params.len(), ..c.meta.clone() });
        for ((_, a), (_, b)) in back.params.iter().zip(c.params.iter()) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.policy_params().len(), PolicyNet::new(&EnvConfig::default(), &PolicyConfig::default()).init(0).len());
    }

    #[test]
    fn corruption_is_rejected() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let p = Path::new("mem");
        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(Error::Format { .. })));
        let mut version = bytes.clone();
        version[6] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version, p), Err(Error::Format { .. })));
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], p), Err(Error::Format { .. })));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        c.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path, Some("other")), Err(Error::Format { .. })));
    }
}
