//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HSTA"            4 bytes magic
//! version: u32      always 1
//! rank: u32
//! extents: u32 × rank
//! data: f64 × Π extents, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{HstaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HSTA";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one tensor; `origin` is only used in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |reason: String| HstaError::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(bad(format!("truncated: wanted {n} more bytes, have {}", cursor.len())));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));

    if take(4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32_at(take(4)?);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rank = u32_at(take(4)?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(take(4)?) as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = take(numel * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if !cursor.is_empty() {
        return Err(bad(format!("{} trailing bytes", cursor.len())));
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| HstaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(t)).map_err(|e| HstaError::io(path, e))?;
    w.flush().map_err(|e| HstaError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| HstaError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| HstaError::io(path, e))?;
    decode(&bytes, path)
}
