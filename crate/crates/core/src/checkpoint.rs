//! Versioned binary archive of named matrices plus a JSON metadata block.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "MGRDARCH" | version u32 | meta_len u64 | meta (UTF-8 JSON)
//! count u32 | count × { name_len u32 | name | group u8 | rows u64 | cols u64 | rows·cols f64 }
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Group code 255 marks tensors that are not parameters (statistics,
//! memories, optimizer moments).

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::io_util::write_atomic;
use crate::params::{Group, ParamStore};

pub const MAGIC: &[u8; 8] = b"MGRDARCH";
pub const VERSION: u32 = 1;
const NO_GROUP: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub group: Option<Group>,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: String,
    pub tensors: Vec<Tensor>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Archive {
    pub fn new(meta: String) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, group: Option<Group>, value: Mat) {
        self.tensors.push(Tensor { name: name.into(), group, value });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .map(|t| &t.value)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no tensor {name:?}")))
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|t| !t.name.starts_with(prefix));
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), Some(p.group), p.value.clone());
        }
    }

    /// Overwrites every parameter of `store` from the tensors under
    /// `prefix`; names, groups and shapes must all match.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<usize> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            let name = format!("{prefix}{}", p.name);
            let t = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("archive has no tensor {name:?}")))?;
            if t.group != Some(p.group) || t.value.dim() != p.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} is {:?} in group {:?}, expected {:?} in {:?}",
                    t.value.dim(),
                    t.group,
                    p.value.dim(),
                    p.group
                )));
            }
            let value = t.value.clone();
            *store.value_mut(id) = value;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(VERSION).unwrap();
        buf.write_u64::<LittleEndian>(self.meta.len() as u64).unwrap();
        buf.extend_from_slice(self.meta.as_bytes());
        buf.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for t in &self.tensors {
            buf.write_u32::<LittleEndian>(t.name.len() as u32).unwrap();
            buf.extend_from_slice(t.name.as_bytes());
            buf.write_u8(t.group.map_or(NO_GROUP, Group::code)).unwrap();
            buf.write_u64::<LittleEndian>(t.value.nrows() as u64).unwrap();
            buf.write_u64::<LittleEndian>(t.value.ncols() as u64).unwrap();
            for &x in t.value.iter() {
                buf.write_f64::<LittleEndian>(x).unwrap();
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt(path, "not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(path, format!("archive version {version}, this build reads {VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch"));
        }
        let mut r = Cursor::new(&body[12..]);
        let bad = |e: std::io::Error| corrupt(path, e);
        let read_string = |r: &mut Cursor<&[u8]>, len: usize| -> Result<String> {
            if len > r.get_ref().len() {
                return Err(corrupt(path, "length field exceeds file size"));
            }
            let mut s = vec![0u8; len];
            r.read_exact(&mut s).map_err(|e| corrupt(path, e))?;
            String::from_utf8(s).map_err(|e| corrupt(path, e))
        };
        let meta_len = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let meta = read_string(&mut r, meta_len)?;
        let count = r.read_u32::<LittleEndian>().map_err(bad)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let name = read_string(&mut r, name_len)?;
            let code = r.read_u8().map_err(bad)?;
            let group = match code {
                NO_GROUP => None,
                c => Some(Group::from_code(c).ok_or_else(|| corrupt(path, format!("unknown group code {c}")))?),
            };
            let rows = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
            let cols = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
            let len = rows.checked_mul(cols).filter(|n| n * 8 <= body.len()).ok_or_else(|| corrupt(path, "bad shape"))?;
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(bad)?;
            let value = Mat::from_shape_vec((rows, cols), data).map_err(|e| corrupt(path, e))?;
            tensors.push(Tensor { name, group, value });
        }
        if (r.position() as usize) != body.len() - 12 {
            return Err(corrupt(path, "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Archive {
        let mut a = Archive::new(r#"{"stage":1}"#.into());
        a.push("image/w", Some(Group::Encoder), array![[1.0, -2.5], [3.25, f64::MIN]]);
        a.push("stats/mean", None, Mat::zeros((1, 0)));
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        a.write(&path).unwrap();
        assert_eq!(Archive::read(&path).unwrap(), a);
    }

    #[test]
    fn rejects_corruption_and_versions() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Archive::from_bytes(&bytes, Path::new("m")), Err(Error::Checkpoint(_))));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let err = Archive::from_bytes(&bytes, Path::new("m")).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(Archive::from_bytes(b"hello", Path::new("m")).is_err());
        let bytes = sample().to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
    }

    #[test]
    fn store_round_trip_checks_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Group::Prompts, array![[1.0, 2.0]]);
        let mut a = Archive::new(String::new());
        a.push_store("p/", &store);
        let mut other = ParamStore::new();
        other.add("a", Group::Prompts, array![[0.0, 0.0]]);
        a.load_store("p/", &mut other).unwrap();
        assert_eq!(other.value(0), store.value(0));
        let mut wrong = ParamStore::new();
        wrong.add("a", Group::Prompts, array![[0.0, 0.0, 0.0]]);
        assert!(a.load_store("p/", &mut wrong).is_err());
        let mut missing = ParamStore::new();
        missing.add("b", Group::Prompts, array![[0.0, 0.0]]);
        assert!(a.load_store("p/", &mut missing).is_err());
    }
}
