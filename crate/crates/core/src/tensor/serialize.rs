//! Checkpoint tensor container.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: header length N][N bytes: JSON header][raw little-endian buffers]
//! ```
//!
//! The header is `{"tensors": [{"name", "shape", "dtype", "offset"}, ...]}`
//! where `dtype` is `"f32"` or `"f64"` and `offset` is the byte offset of the
//! tensor's buffer from the start of the data section. Buffers are stored
//! back to back in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::element::{DType, StorageElement};
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: StorageElement>(tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset: data.len(),
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let header = serde_json::to_vec(&ContainerHeader { tensors: entries })?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::invalid(format!("tensor container: {}", msg.into()))
}

/// Decodes every tensor, converting stored elements to `T` when the stored
/// dtype differs.
pub fn decode<T: StorageElement>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    if bytes.len() < 8 {
        return Err(corrupt("truncated length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[8..header_end])?;
    let data = &bytes[header_end..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let width = e.dtype.size_of();
        let end = e
            .offset
            .checked_add(numel * width)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| corrupt(format!("buffer of {} out of bounds", e.name)))?;
        let raw = &data[e.offset..end];
        let values: Vec<T> = match e.dtype {
            d if d == T::DTYPE => raw.chunks_exact(width).map(T::read_le).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(&e.shape, values)?;
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save<T: StorageElement>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: StorageElement>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
