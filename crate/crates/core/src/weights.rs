//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"AMNW"`       |
//! | version      | u32 (= 1)       |
//! | tensor count | u32             |
//!
//! then per tensor, in parameter-store order:
//!
//! | field       | type                         |
//! |-------------|------------------------------|
//! | name length | u32                          |
//! | name        | UTF-8 bytes                  |
//! | dtype       | u8 (0 = f32, 1 = f64)        |
//! | rank        | u32 (always 4)               |
//! | dims        | rank × u32, NCHW             |
//! | payload     | element bytes, NCHW order    |

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"AMNW";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        let dims = p.value.shape().dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::WeightFile(format!(
                    "truncated while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// One decoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Decodes every record, requiring the file dtype to be `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Vec<Record<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::WeightFile(
            "bad magic, not an AMNW weight file".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut records: Vec<Record<T>> = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightFile(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::WeightFile(format!("`{name}`: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::DType {
                expected: T::DTYPE,
                found: dtype,
            });
        }
        let rank = r.u32("rank")? as usize;
        if rank != 4 {
            return Err(Error::WeightFile(format!(
                "`{name}`: rank {rank}, expected 4"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let size = dtype.size_of();
        let payload = r.take(shape.numel().saturating_mul(size), "payload")?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        if records.iter().any(|rec| rec.name == name) {
            return Err(Error::WeightFile(format!("duplicate tensor `{name}`")));
        }
        records.push(Record {
            name,
            tensor: Tensor::from_vec(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFile(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

/// Overwrites `store` from a weight file whose names, order and shapes match it exactly.
pub fn load_into<T: Element>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let records = decode::<T>(bytes)?;
    if records.len() != store.len() {
        return Err(Error::WeightFile(format!(
            "file holds {} tensors, network has {}",
            records.len(),
            store.len()
        )));
    }
    let expected: Vec<String> = store.names().map(str::to_string).collect();
    for (rec, want) in records.iter().zip(&expected) {
        if &rec.name != want {
            return Err(Error::WeightFile(format!(
                "expected `{want}`, found `{}`",
                rec.name
            )));
        }
    }
    for rec in records {
        store.set(&rec.name, rec.tensor)?;
    }
    Ok(())
}

pub fn save<T: Element>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Element>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    load_into(&std::fs::read(path)?, store)
}
