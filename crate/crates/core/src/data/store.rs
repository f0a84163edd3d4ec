//! JSONL and sidecar tensor files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IMAGE_MAGIC: &[u8; 8] = b"UVLMIMG1";

/// Tensor file layout: the magic `UVLMIMG1`, the number of dimensions and
/// each dimension as little-endian `u64`, then the values as little-endian
/// `f64` in row-major order.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * (t.shape().len() + t.numel()));
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let mut words = bytes
        .get(8..)
        .filter(|_| bytes.starts_with(IMAGE_MAGIC))
        .ok_or_else(|| bad("not a tensor file"))?
        .chunks(8);
    let mut next = || -> Result<[u8; 8]> {
        words
            .next()
            .and_then(|c| c.try_into().ok())
            .ok_or_else(|| bad("truncated tensor file"))
    };
    let ndims = u64::from_le_bytes(next()?) as usize;
    if ndims > 8 {
        return Err(bad("too many dimensions"));
    }
    let shape = (0..ndims)
        .map(|_| next().map(|w| u64::from_le_bytes(w) as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| next().map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    if next().is_ok() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Tensor::new(shape, data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// One compact JSON object per line, each line ending in `\n`.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}
