//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DACW`, `u32` tensor count, then for each
//! tensor a `u32` rank, `rank` × `u32` dimensions and the row-major `f64`
//! values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DACW";

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!(
            "checkpoint truncated while reading {what}"
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

pub fn decode(mut buf: &[u8]) -> Result<Vec<Tensor>> {
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a DACW checkpoint (bad magic)".into()));
    }
    let count = read_u32(&mut buf, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let rank = read_u32(&mut buf, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut buf, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = take(&mut buf, numel * 8, "tensor values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {i}: {e}")))?;
        tensors.push(t);
    }
    if !buf.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len()
        )));
    }
    Ok(tensors)
}

pub fn write(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(tensors))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
