//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "GCAR"                     4-byte magic
//! u32  version               currently 1
//! u64  config digest         FNV-1a 64 of the canonical config JSON
//! u32  config length, bytes  canonical ModelConfig JSON (UTF-8)
//! u32  entry count
//! per entry:
//!   u16 name length, bytes   dotted parameter path (UTF-8)
//!   u8  kind                 0 = learned parameter, 1 = buffer
//!   u8  dtype                0 = f32
//!   u8  rank, rank × u32     dims
//!   values                   row-major, prod(dims) × f32
//! u64  checksum              FNV-1a 64 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{fnv1a, Model, ModelConfig};
use crate::numerics::Scalar;
use crate::params::{Module, Param, Visitor};

pub const MAGIC: &[u8; 4] = b"GCAR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub digest: u64,
    pub entries: Vec<Entry>,
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &mut Model<T>) -> Self {
        struct Collect(Vec<Entry>);
        impl<T: Scalar> Visitor<T> for Collect {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                self.0.push(Entry {
                    name: name.to_string(),
                    kind: EntryKind::Param,
                    dims: p.dims.clone(),
                    values: to_f32(&p.value),
                });
            }
            fn buffer(&mut self, name: &str, dims: &[usize], values: &mut Vec<T>) {
                self.0.push(Entry {
                    name: name.to_string(),
                    kind: EntryKind::Buffer,
                    dims: dims.to_vec(),
                    values: to_f32(values),
                });
            }
        }
        let mut c = Collect(Vec::new());
        model.visit("", &mut c);
        Checkpoint {
            config: model.cfg.clone(),
            digest: model.cfg.digest(),
            entries: c.0,
        }
    }

    /// Number of learned values (buffers excluded).
    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.values.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        let cfg = self.config.canonical_json();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                EntryKind::Param => 0,
                EntryKind::Buffer => 1,
            });
            out.push(DTYPE_F32);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 8 + 8 {
            return Err(CheckpointError::Malformed("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        let computed = fnv1a(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, at: 8 };
        let digest = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let found = fnv1a(cfg_text.as_bytes());
        if found != digest {
            return Err(CheckpointError::DigestMismatch { expected: digest, found });
        }
        let config: ModelConfig = serde_json::from_str(cfg_text)
            .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let kind = match r.u8()? {
                0 => EntryKind::Param,
                1 => EntryKind::Buffer,
                k => return Err(CheckpointError::Malformed(format!("entry {name}: unknown kind {k}"))),
            };
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Malformed(format!("entry {name}: unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry { name, kind, dims, values });
        }
        if r.at != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after entries".into()));
        }
        Ok(Checkpoint { config, digest, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Fails unless the checkpoint was written for exactly `cfg`.
    pub fn expect_config(&self, cfg: &ModelConfig) -> Result<(), CheckpointError> {
        let expected = cfg.digest();
        if expected != self.digest {
            return Err(CheckpointError::DigestMismatch {
                expected,
                found: self.digest,
            });
        }
        Ok(())
    }

    /// Copies every entry into a model built from the same config.
    pub fn apply<T: Scalar>(&self, model: &mut Model<T>) -> Result<(), CheckpointError> {
        self.expect_config(&model.cfg)?;
        struct Apply<'a> {
            entries: std::collections::HashMap<&'a str, &'a Entry>,
            err: Option<CheckpointError>,
        }
        impl Apply<'_> {
            fn fill<T: Scalar>(&mut self, name: &str, dims: &[usize], dst: &mut [T]) {
                if self.err.is_some() {
                    return;
                }
                match self.entries.get(name) {
                    None => self.err = Some(CheckpointError::MissingEntry(name.to_string())),
                    Some(e) if e.dims != dims => {
                        self.err = Some(CheckpointError::EntryShape {
                            name: name.to_string(),
                            expected: dims.to_vec(),
                            found: e.dims.clone(),
                        })
                    }
                    Some(e) => {
                        for (d, &v) in dst.iter_mut().zip(&e.values) {
                            *d = T::from_f32(v).unwrap_or_else(T::nan);
                        }
                    }
                }
            }
        }
        impl<T: Scalar> Visitor<T> for Apply<'_> {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                let dims = p.dims.clone();
                self.fill(name, &dims, &mut p.value);
            }
            fn buffer(&mut self, name: &str, dims: &[usize], values: &mut Vec<T>) {
                self.fill(name, dims, values);
            }
        }
        let mut names = std::collections::HashMap::new();
        for e in &self.entries {
            if names.insert(e.name.as_str(), e).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate entry {}", e.name)));
            }
        }
        let mut a = Apply { entries: names, err: None };
        model.visit("", &mut a);
        match a.err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Builds a fresh model from the stored config and loads all entries.
    pub fn into_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut m = Model::new(self.config.clone())?;
        self.apply(&mut m)?;
        Ok(m)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).write(path)
}

/// Reads a checkpoint and rebuilds its model.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Checkpoint::read(path)?.into_model()
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}
