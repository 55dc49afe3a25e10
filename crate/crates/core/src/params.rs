//! Named parameter tensors and the binary checkpoint container.
//!
//! Parameter names are dotted paths (`enhance.0.mix_w`); the first component
//! is the section the tensor is stored under in the checkpoint file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    trainable: Vec<bool>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Zero-filled gradient (or optimizer-moment) buffers matching the store.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors
            .iter()
            .map(|t| Mat::zeros(t.rows(), t.cols()))
            .collect()
    }

    fn sections(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, name) in self.names.iter().enumerate() {
            let section = name.split('.').next().unwrap_or(name).to_string();
            if !grouped.contains_key(&section) {
                order.push(section.clone());
            }
            grouped.entry(section).or_default().push(i);
        }
        order
            .into_iter()
            .map(|s| {
                let ids = grouped.remove(&s).unwrap();
                (s, ids)
            })
            .collect()
    }

    /// Serializes the container: magic, version, a metadata blob, then one
    /// section per top-level name component with explicit tensor shapes.
    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ADC1");
        out.extend_from_slice(&1u32.to_le_bytes());
        let meta_bytes = meta.as_bytes();
        out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_bytes);
        let sections = self.sections();
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (section, ids) in &sections {
            write_str(&mut out, section);
            out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
            for &i in ids {
                let rest = self.names[i]
                    .strip_prefix(&format!("{section}."))
                    .unwrap_or("");
                write_str(&mut out, rest);
                let t = &self.tensors[i];
                out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
                out.push(self.trainable[i] as u8);
                for &v in t.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let bytes = self.to_bytes(meta);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Reconstructs a store (and the metadata blob) from container bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, String)> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != b"ADC1" {
            return Err(Error::InvalidData("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::InvalidData(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::InvalidData("checkpoint metadata is not utf-8".into()))?;
        let n_sections = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_sections {
            let section = r.str()?;
            let n_tensors = r.u32()? as usize;
            for _ in 0..n_tensors {
                let rest = r.str()?;
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let trainable = r.u8()? != 0;
                let n = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::InvalidData("tensor dimension overflow".into()))?;
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                }
                let name = if rest.is_empty() {
                    section.clone()
                } else {
                    format!("{section}.{rest}")
                };
                store.add(name, Mat::from_vec(rows, cols, data), trainable);
            }
        }
        Ok((store, meta))
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ParamStore::from_bytes(&bytes)
    }

    /// Copies tensors from `other` into this store by name; shapes must match.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in other.ids() {
            let name = other.name(id);
            let target = self.find(name).ok_or_else(|| {
                Error::InvalidData(format!("checkpoint tensor {name} not present in model"))
            })?;
            let src = other.get(id);
            let dst = self.get_mut(target);
            if dst.shape() != src.shape() {
                return Err(Error::InvalidData(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Hex SHA-256 over the tensors whose names start with `prefix`
    /// (used for the decoder frozenness check).
    pub fn section_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (i, name) in self.names.iter().enumerate() {
            if name == prefix || name.starts_with(&format!("{prefix}.")) {
                h.update(name.as_bytes());
                for &v in self.tensors[i].as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(sha256_hex(&bytes))
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::InvalidData("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::InvalidData("non-utf8 name in checkpoint".into()))
    }
}
