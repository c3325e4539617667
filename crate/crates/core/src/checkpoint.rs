//! Named-tensor parameter store and the FTMC checkpoint container.
//!
//! FTMC layout (little-endian):
//!
//! ```text
//! magic  b"FTMC"
//! u32    version (1)
//! u32    tensor count
//! repeated, in name order:
//!   u32    name length, then UTF-8 name bytes
//!   u32    rank, then rank × u32 dims
//!   u8     dtype tag (0 = f32, 1 = f64)
//!   raw little-endian payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{DType, Real, Tensor};
use crate::error::{FtmError, Result};

pub const FTMC_MAGIC: &[u8; 4] = b"FTMC";
pub const FTMC_VERSION: u32 = 1;

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| FtmError::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every tensor of `other` whose name starts with `prefix`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in &other.map {
            if k.starts_with(prefix) {
                self.map.insert(k.clone(), v.clone());
                n += 1;
            }
        }
        n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FTMC_MAGIC);
        out.extend_from_slice(&FTMC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, t) in &self.map {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(T::DTYPE as u8);
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses an FTMC container; payloads stored in the other precision are
    /// converted.
    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != FTMC_MAGIC {
            return Err(FtmError::Format("missing FTMC magic".into()));
        }
        let version = read_u32(r)?;
        if version != FTMC_VERSION {
            return Err(FtmError::Format(format!("unsupported FTMC version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| FtmError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(truncated)?;
            let n: usize = dims.iter().product();
            let data: Vec<T> = match tag[0] {
                0 => read_payload::<f32>(r, n)?.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
                1 => read_payload::<f64>(r, n)?.into_iter().map(T::from_f64_lossy).collect(),
                t => return Err(FtmError::Format(format!("unknown dtype tag {t} for {name}"))),
            };
            store.insert(name, Tensor::from_vec(&dims, data)?);
        }
        if !bytes.is_empty() {
            return Err(FtmError::Format("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated(_: std::io::Error) -> FtmError {
    FtmError::Format("truncated FTMC container".into())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_payload<U: Real>(r: &mut &[u8], n: usize) -> Result<Vec<U>> {
    let width = match U::DTYPE {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw).map_err(truncated)?;
    Ok(raw.chunks_exact(width).map(U::read_le).collect())
}
