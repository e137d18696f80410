//! Flat little-endian parameter container shared by the coupling network and
//! the victim classifier.
//!
//! ```text
//! magic   b"SVCK"
//! version u8 (= 1)
//! u32     metadata entry count, then per entry:
//!           u32 key length, key bytes (UTF-8), u32 value length, value bytes
//! u32     tensor count, then per tensor:
//!           u32 name length, name bytes, u32 rank, rank x u32 dims,
//!           prod(dims) x f32 payload
//! ```
//!
//! Coupling parameters are named `block{i}.{psi|phi|rho|eta}.conv{j}.{weight|bias}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { kind: "checkpoint", reason: reason.into() }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad("length exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("unexpected end of file"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non UTF-8 string"))
    }
}

impl Checkpoint {
    pub fn from_params<T: Float>(store: &ParamStore<T>) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            tensors: store.names().iter().cloned().zip(store.tensors().iter().map(Tensor::cast)).collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_u32(&mut out, self.meta.len())?;
        for (k, v) in &self.meta {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(Error::io(path))?;
        f.write_all(&bytes).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(Error::io(path))?;
        Self::from_bytes(&buf)
    }

    /// Copies tensors into `store` by name; every store entry must be present.
    pub fn restore_into<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..store.len() {
            let name = store.names()[i].clone();
            let src = by_name.get(name.as_str()).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let dst = store.get_mut(crate::nn::ParamId(i));
            if dst.shape() != src.shape() {
                return Err(bad(format!("{name}: shape {:?}, expected {:?}", src.shape(), dst.shape())));
            }
            *dst = src.cast();
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| bad(format!("missing metadata `{key}`")))
    }
}
