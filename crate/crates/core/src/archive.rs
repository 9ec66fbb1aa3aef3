//! The `AESU1` named-tensor archive.
//!
//! ```text
//! magic   "AESU1"                      5 bytes
//! count   u32 LE                       4 bytes
//! count × entry:
//!   name_len  u16 LE, name UTF-8 bytes
//!   dtype     u8   (0 = f32, 1 = f64)
//!   rank      u8
//!   dims      rank × u64 LE
//!   payload   product(dims) × dtype size, little-endian, row-major
//! ```

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"AESU1";
pub const HEADER_LEN: usize = 9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArchiveError {
    #[error("bad magic: not an AESU1 archive")]
    BadMagic,
    #[error("truncated archive: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("unknown dtype code {code} at offset {offset}")]
    UnknownDtype { code: u8, offset: usize },
    #[error("tensor name at offset {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("tensor `{0}`: name longer than 65535 bytes")]
    NameTooLong(String),
    #[error("tensor `{0}`: rank above 255")]
    RankTooLarge(String),
    #[error("tensor `{name}`: {len} elements do not match dims {dims:?}")]
    PayloadMismatch {
        name: String,
        dims: Vec<usize>,
        len: usize,
    },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveEntry {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        ArchiveEntry {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data,
        }
    }

    /// Converts to a tensor of element type `T`; values are cast if the
    /// stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> crate::error::Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        };
        Tensor::from_vec(&self.dims, data)
    }

    pub fn scalar_f64(name: &str, value: f64) -> Self {
        ArchiveEntry {
            name: name.to_string(),
            dims: alloc::vec![1],
            data: TensorData::F64(alloc::vec![value]),
        }
    }

    /// First element as `f64`, for scalar metadata entries.
    pub fn first_f64(&self) -> Option<f64> {
        match &self.data {
            TensorData::F32(v) => v.first().map(|&x| x as f64),
            TensorData::F64(v) => v.first().copied(),
        }
    }
}

/// Serializes `entries`; names must be unique.
pub fn save_archive(entries: &[ArchiveEntry]) -> Result<Vec<u8>, ArchiveError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(ArchiveError::DuplicateName(e.name.clone()));
        }
        let numel: usize = e.dims.iter().product();
        if numel != e.data.len() {
            return Err(ArchiveError::PayloadMismatch {
                name: e.name.clone(),
                dims: e.dims.clone(),
                len: e.data.len(),
            });
        }
        let name_len = u16::try_from(e.name.len()).map_err(|_| ArchiveError::NameTooLong(e.name.clone()))?;
        let rank = u8::try_from(e.dims.len()).map_err(|_| ArchiveError::RankTooLarge(e.name.clone()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let dtype = match e.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        };
        out.push(dtype.code());
        out.push(rank);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ArchiveError::Truncated {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_archive(bytes: &[u8]) -> Result<Vec<ArchiveEntry>, ArchiveError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()? as usize;
    let mut seen = BTreeSet::new();
    // Each entry occupies at least 4 bytes; don't trust `count` for allocation.
    let mut entries = Vec::with_capacity(count.min(bytes.len() / 4));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_at = r.pos;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ArchiveError::InvalidName(name_at))?
            .to_string();
        let dtype_at = r.pos;
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or(ArchiveError::UnknownDtype {
            code,
            offset: dtype_at,
        })?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let payload_len = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        let payload = r.take(payload_len)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
        };
        if !seen.insert(name.clone()) {
            return Err(ArchiveError::DuplicateName(name));
        }
        entries.push(ArchiveEntry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_archive_is_nine_bytes() {
        let bytes = save_archive(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..5], b"AESU1");
        assert_eq!(load_archive(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn single_f32_entry_length_follows_header_formula() {
        let e = ArchiveEntry {
            name: "w".into(),
            dims: vec![2, 3],
            data: TensorData::F32(vec![0.5; 6]),
        };
        let bytes = save_archive(core::slice::from_ref(&e)).unwrap();
        // header + name_len + name + dtype + rank + dims + payload
        assert_eq!(bytes.len(), 9 + 2 + 1 + 1 + 1 + 2 * 8 + 24);
        assert_eq!(load_archive(&bytes).unwrap(), vec![e]);
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert_eq!(load_archive(b"AESU2\0\0\0\0"), Err(ArchiveError::BadMagic));
        let e = ArchiveEntry::scalar_f64("x", 1.0);
        let mut bytes = save_archive(core::slice::from_ref(&e)).unwrap();
        assert!(matches!(
            load_archive(&bytes[..bytes.len() - 1]),
            Err(ArchiveError::Truncated { .. })
        ));
        assert_eq!(
            save_archive(&[e.clone(), e.clone()]),
            Err(ArchiveError::DuplicateName("x".into()))
        );
        bytes[9 + 2 + 1] = 9;
        assert_eq!(
            load_archive(&bytes),
            Err(ArchiveError::UnknownDtype { code: 9, offset: 12 })
        );
    }

    #[test]
    fn duplicate_names_rejected_on_load() {
        let e = ArchiveEntry::scalar_f64("x", 1.0);
        let mut bytes = save_archive(core::slice::from_ref(&e)).unwrap();
        let body = bytes[HEADER_LEN..].to_vec();
        bytes.extend_from_slice(&body);
        bytes[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert_eq!(load_archive(&bytes), Err(ArchiveError::DuplicateName("x".into())));
    }
}
