//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//! `magic "RPRTNSR\0"`, `version: u32`, `count: u32`, then `count` records of
//! `name_len: u32`, `name: utf8`, `dtype: u8`, `ndim: u32`, `dims: u64 * ndim`,
//! `data: raw little-endian elements`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RPRTNSR\0";
pub const VERSION: u32 = 1;

pub fn write_tensors<T: Real, W: Write>(out: &mut W, records: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.tag());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read every record, converting elements to `T` when the stored dtype
/// differs.
pub fn read_tensors<T: Real, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("non-utf8 tensor name".into()))?;
        let tag = c.take(1)?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype {tag}")))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

impl<T: Real> ParamStore<T> {
    pub fn records(&self) -> Vec<(String, &Tensor<T>)> {
        self.iter().map(|p| (p.name.clone(), &p.value)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_tensors(&mut f, &self.records())?;
        f.flush()?;
        Ok(())
    }

    /// Build a store from records in file order.
    pub fn from_records(records: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in records {
            store.register(name, t)?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_records(read_tensors(&mut f)?)
    }
}
