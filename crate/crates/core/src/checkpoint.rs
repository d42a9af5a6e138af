//! Binary checkpoint container: named arrays plus a JSON metadata record.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic          8 bytes  "PAMACKPT"
//! version        u32
//! meta_len       u32
//! meta           meta_len bytes of UTF-8 JSON
//! count          u32
//! count times:
//!   name_len     u16
//!   name         name_len bytes of UTF-8
//!   dtype        u8       0 = f32, 1 = f64
//!   rank         u8
//!   dims         rank x u64
//!   data         product(dims) values, row major
//! digest         32 bytes SHA-256 of everything above
//! ```
//!
//! Files are written to a sibling temporary file and renamed into place, so
//! a reader never sees a partial checkpoint under the final name.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::ProfileName;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PAMACKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// The metadata record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub profile: ProfileName,
    pub stages: usize,
    /// Completed optimization steps.
    #[serde(default)]
    pub step: u64,
    /// Free-form record of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(profile: ProfileName, stages: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            profile,
            stages,
            step: 0,
            config: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no array named {name}")))
    }

    /// Fails unless the checkpoint was written for `profile`.
    pub fn expect_profile(&self, profile: ProfileName) -> Result<()> {
        if self.meta.profile != profile {
            return Err(Error::Incompatible(format!(
                "checkpoint is for the {} profile, run uses {}",
                self.meta.profile, profile
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            let name_len = u16::try_from(name_bytes.len())
                .map_err(|_| Error::Config(format!("array name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name_bytes);
            let t = t.contiguous()?;
            let code = match t.dtype() {
                DType::F32 => 0u8,
                DType::F64 => 1u8,
                other => return Err(Error::Config(format!("cannot store {other:?} array {name}"))),
            };
            out.push(code);
            out.push(t.rank() as u8);
            for d in t.dims() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            match code {
                0 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Integrity("checkpoint is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint digest mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != version {
            return Err(Error::Integrity(format!(
                "header says version {version}, metadata says {}",
                meta.format_version
            )));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("array name is not UTF-8".into()))?
                .to_string();
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let t = match code {
                0 => {
                    let raw = r.take(n * 4)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::Integrity(format!("unknown dtype code {other} for {name}"))),
            };
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after the last array".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointMeta::new(ProfileName::Tiny, 3));
        ck.meta.step = 17;
        let a = Tensor::new(&[[1.5f32, -0.0, f32::MIN_POSITIVE]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[std::f64::consts::PI, 1e-300], &Device::Cpu).unwrap();
        ck.tensors.insert("a".into(), a);
        ck.tensors.insert("b.weight".into(), b);
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ck.meta);
        let a: Vec<u32> = back.get("a").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, vec![1.5f32.to_bits(), (-0.0f32).to_bits(), f32::MIN_POSITIVE.to_bits()]);
        assert_eq!(back.get("a").unwrap().dims(), &[1, 3]);
        assert_eq!(back.get("b.weight").unwrap().to_vec1::<f64>().unwrap(), vec![std::f64::consts::PI, 1e-300]);
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_bit_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn other_versions_are_incompatible() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(&err, Error::Incompatible(m) if m.contains('7') && m.contains('1')), "{err}");
    }

    #[test]
    fn profile_mismatch_is_incompatible() {
        let ck = sample();
        assert!(ck.expect_profile(ProfileName::Tiny).is_ok());
        assert!(matches!(ck.expect_profile(ProfileName::Full), Err(Error::Incompatible(_))));
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.pama");
        sample().save(&path).unwrap();
        assert!(!dir.path().join("ck.pama.tmp").exists());
        assert_eq!(Checkpoint::load(&path).unwrap().meta.step, 17);
    }
}
