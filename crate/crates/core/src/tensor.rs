//! Named-tensor archive: the on-disk format for adapter weights.
//!
//! ```text
//! "ELRA" | u32 version=1 | u32 count | count x entry
//! entry: u32 name_len | name (utf-8) | u32 ndim | ndim x u32 dim | prod(dim) x f32
//! ```
//! All integers and floats are little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ELRA";
const VERSION: u32 = 1;
pub(crate) const MAX_NAME: usize = 4096;
pub(crate) const MAX_DIMS: usize = 8;
pub(crate) const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

pub(crate) fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_DIMS {
        return Err(Error::Wire(format!(
            "{} dimensions exceeds {MAX_DIMS}",
            shape.len()
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .filter(|n| *n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Wire(format!("shape {shape:?} too large")))
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) fn put_shape_and_data(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    put_u32(out, shape.len());
    for d in shape {
        put_u32(out, *d);
    }
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_archive(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_shape_and_data(&mut out, &t.shape, &t.data);
    }
    out
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Wire(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn shape_and_data(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let ndim = self.u32()?;
        if ndim > MAX_DIMS {
            return Err(Error::Wire(format!("{ndim} dimensions exceeds {MAX_DIMS}")));
        }
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = element_count(&shape)?;
        if n.saturating_mul(4) > self.remaining() {
            return Err(Error::Wire(format!(
                "payload for shape {shape:?} exceeds remaining {} bytes",
                self.remaining()
            )));
        }
        let bytes = self.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((shape, data))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Wire("bad archive magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Wire(format!(
            "unsupported archive version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        if len > MAX_NAME {
            return Err(Error::Wire(format!("tensor name of {len} bytes")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Wire("tensor name is not utf-8".into()))?
            .to_owned();
        let (shape, data) = r.shape_and_data()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Wire(format!("tensor {name} has non-finite values")));
        }
        out.push(NamedTensor { name, shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::Wire(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}
