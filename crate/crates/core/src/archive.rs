//! Bit-exact container for named tensors plus a JSON metadata block.
//!
//! Layout:
//!
//! ```text
//! offset 0   magic          8 bytes, b"EMTALv01"
//! offset 8   header_len     u64 little-endian
//! offset 16  header         UTF-8 JSON, exactly header_len bytes:
//!            {"meta": {...}, "tensors": {"name": {"dtype": "f32",
//!                                                 "shape": [rows, cols],
//!                                                 "offset": 0}, ...}}
//! then       data section   little-endian row-major scalars; every tensor
//!                           starts at an offset that is a multiple of 8,
//!                           gaps are zero padding
//! ```
//!
//! The file length must equal `16 + header_len + data_len` exactly, where
//! `data_len` is the end of the last tensor. Tensor names are sorted, offsets
//! are assigned in that order, and the JSON serialization is canonical, so
//! identical inputs always produce byte-identical files.

use crate::error::{Error, Result};
use crate::linalg::{Dtype, Matrix, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"EMTALv01";

/// A tensor of either supported precision, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyMatrix {
    F32(Matrix<f32>),
    F64(Matrix<f64>),
}

impl AnyMatrix {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyMatrix::F32(_) => Dtype::F32,
            AnyMatrix::F64(_) => Dtype::F64,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            AnyMatrix::F32(m) => m.rows(),
            AnyMatrix::F64(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            AnyMatrix::F32(m) => m.cols(),
            AnyMatrix::F64(m) => m.cols(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.rows() * self.cols() * self.dtype().width()
    }

    pub fn all_finite(&self) -> bool {
        match self {
            AnyMatrix::F32(m) => m.all_finite(),
            AnyMatrix::F64(m) => m.all_finite(),
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            AnyMatrix::F32(m) => {
                for &v in m.data() {
                    v.write_le(out);
                }
            }
            AnyMatrix::F64(m) => {
                for &v in m.data() {
                    v.write_le(out);
                }
            }
        }
    }
}

/// Precision hook tying [`Scalar`] values to their [`AnyMatrix`] variant.
pub trait ArchiveScalar: Scalar {
    fn wrap(m: Matrix<Self>) -> AnyMatrix;
    fn unwrap(a: &AnyMatrix) -> Option<&Matrix<Self>>;
}

impl ArchiveScalar for f32 {
    fn wrap(m: Matrix<f32>) -> AnyMatrix {
        AnyMatrix::F32(m)
    }
    fn unwrap(a: &AnyMatrix) -> Option<&Matrix<f32>> {
        match a {
            AnyMatrix::F32(m) => Some(m),
            _ => None,
        }
    }
}

impl ArchiveScalar for f64 {
    fn wrap(m: Matrix<f64>) -> AnyMatrix {
        AnyMatrix::F64(m)
    }
    fn unwrap(a: &AnyMatrix) -> Option<&Matrix<f64>> {
        match a {
            AnyMatrix::F64(m) => Some(m),
            _ => None,
        }
    }
}

pub type TensorMap = BTreeMap<String, AnyMatrix>;
pub type Meta = serde_json::Map<String, serde_json::Value>;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Meta,
    tensors: BTreeMap<String, HeaderEntry>,
}

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

/// Serializes `(tensors, meta)` to the container byte layout.
pub fn archive_bytes(tensors: &TensorMap, meta: &Meta) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut cursor = 0usize;
    for (name, tensor) in tensors {
        if name.is_empty() {
            return Err(Error::Config("archive: empty tensor name".into()));
        }
        if !tensor.all_finite() {
            return Err(Error::Numeric(format!(
                "archive: non-finite entries in tensor `{name}`"
            )));
        }
        let offset = align8(cursor);
        entries.insert(
            name.clone(),
            HeaderEntry {
                dtype: tensor.dtype().name().to_string(),
                shape: vec![tensor.rows(), tensor.cols()],
                offset: offset as u64,
            },
        );
        cursor = offset + tensor.byte_len();
    }
    let header = Header {
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json =
        serde_json::to_string(&header).map_err(|e| Error::Format(format!("header: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for tensor in tensors.values() {
        while (out.len() - 16 - header_json.len()) % 8 != 0 {
            out.push(0);
        }
        tensor.write_data(&mut out);
    }
    Ok(out)
}

/// Writes an archive atomically (temp file + rename).
pub fn write_archive(path: &Path, tensors: &TensorMap, meta: &Meta) -> Result<()> {
    let bytes = archive_bytes(tensors, meta)?;
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses and validates the container byte layout.
pub fn read_archive_bytes(bytes: &[u8]) -> Result<(TensorMap, Meta)> {
    if bytes.len() < 16 {
        return Err(Error::Corrupt("archive shorter than fixed header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Corrupt("header length overflow".into()))?;
    if data_start > bytes.len() {
        return Err(Error::Corrupt("header extends beyond file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Corrupt(format!("header json: {e}")))?;

    let data = &bytes[data_start..];
    let mut ranges: Vec<(usize, usize, &str)> = Vec::new();
    for (name, entry) in &header.tensors {
        let dtype = Dtype::parse(&entry.dtype)
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: unknown dtype {}", entry.dtype)))?;
        let (rows, cols) = match entry.shape.as_slice() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}`: unsupported shape rank {}",
                    other.len()
                )))
            }
        };
        let offset = entry.offset as usize;
        if offset % 8 != 0 {
            return Err(Error::Corrupt(format!(
                "tensor `{name}`: offset {offset} not 8-byte aligned"
            )));
        }
        let nbytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}`: shape overflow")))?;
        let end = offset
            .checked_add(nbytes)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}`: range overflow")))?;
        if end > data.len() {
            return Err(Error::Corrupt(format!(
                "tensor `{name}`: data section truncated"
            )));
        }
        ranges.push((offset, end, name));
    }
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Corrupt(format!(
                "tensors `{}` and `{}` overlap",
                w[0].2, w[1].2
            )));
        }
    }
    let expected_data_len = ranges.last().map_or(0, |r| r.1);
    if data.len() != expected_data_len {
        return Err(Error::Corrupt(format!(
            "data section length {} does not match declared tensors ({expected_data_len})",
            data.len()
        )));
    }

    let mut tensors = TensorMap::new();
    for (name, entry) in &header.tensors {
        let dtype = Dtype::parse(&entry.dtype).expect("validated above");
        let (rows, cols) = match entry.shape.as_slice() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("validated above"),
        };
        let offset = entry.offset as usize;
        let raw = &data[offset..offset + rows * cols * dtype.width()];
        let tensor = match dtype {
            Dtype::F32 => {
                let vals: Vec<f32> = raw.chunks_exact(4).map(f32::read_le).collect();
                AnyMatrix::F32(Matrix::from_vec(rows, cols, vals).expect("sized"))
            }
            Dtype::F64 => {
                let vals: Vec<f64> = raw.chunks_exact(8).map(f64::read_le).collect();
                AnyMatrix::F64(Matrix::from_vec(rows, cols, vals).expect("sized"))
            }
        };
        if !tensor.all_finite() {
            return Err(Error::Corrupt(format!(
                "tensor `{name}`: non-finite entries"
            )));
        }
        tensors.insert(name.clone(), tensor);
    }
    Ok((tensors, header.meta))
}

pub fn read_archive(path: &Path) -> Result<(TensorMap, Meta)> {
    let bytes = std::fs::read(path)?;
    read_archive_bytes(&bytes)
}
