//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes   b"FCKP"
//! version    u32       CHECKPOINT_VERSION
//! count      u32       number of records
//! record * count:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rank     u32       always 2
//!   dims     rank * u64
//!   values   prod(dims) * f64, row-major
//! ```
//!
//! Values are always stored as `f64` regardless of the in-memory scalar type.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Self { name: name.to_string(), rows: t.rows(), cols: t.cols(), values: t.to_f64_vec() }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(self.rows, self.cols, self.values.iter().map(|&v| T::lit(v)).collect())
            .expect("record shape checked on read")
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(r.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(r.cols as u64).to_le_bytes());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
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

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = c.u32()?;
        if rank != 2 {
            return Err(Error::Format(format!("{name}: rank {rank}, expected 2")));
        }
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let bytes = c.take(rows * cols * 8)?;
        let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push(Record { name, rows, cols, values });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - c.pos)));
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn store_records<T: Scalar>(store: &ParamStore<T>) -> Vec<Record> {
    store.iter().map(|(_, p)| Record::from_tensor(&p.name, &p.tensor)).collect()
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write_records(path, &store_records(store))
}

/// Overwrite parameter values from records.
///
/// Every record must name an existing parameter of the same shape. When
/// `require_all` is set, every parameter of the store must also be covered.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, records: &[Record], require_all: bool) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for r in records {
        let id = store
            .id(&r.name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {} not in model", r.name)))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != [r.rows, r.cols] {
            return Err(Error::Shape(format!(
                "{}: checkpoint {}x{}, model {:?}",
                r.name,
                r.rows,
                r.cols,
                p.tensor.shape()
            )));
        }
        p.tensor = r.to_tensor();
        seen[id.index()] = true;
    }
    if require_all {
        if let Some((_, p)) = store.iter().find(|(id, _)| !seen[id.index()]) {
            return Err(Error::Format(format!("checkpoint is missing parameter {}", p.name)));
        }
    }
    Ok(())
}
