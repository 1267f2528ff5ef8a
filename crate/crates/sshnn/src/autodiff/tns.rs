//! Tensor file format used by checkpoints and datasets.
//!
//! Layout, all little-endian: magic `TNS1`, one `u8` dtype tag
//! (0 = f32, 1 = f64), one `u8` rank, `rank` × `u64` dims, then the raw
//! element data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Validation(format!("unknown TNS1 dtype tag {other}"))),
        }
    }
}

pub fn to_bytes(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Tensor, DType)> {
    let mut cur = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Validation(format!(
            "bad TNS1 magic {:?}",
            &magic[..]
        )));
    }
    let mut b1 = [0u8; 1];
    read_exact(&mut cur, &mut b1, "dtype")?;
    let dtype = DType::from_tag(b1[0])?;
    read_exact(&mut cur, &mut b1, "rank")?;
    let rank = b1[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b8 = [0u8; 8];
        read_exact(&mut cur, &mut b8, "dims")?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DType::F32 => {
            for _ in 0..numel {
                let mut b4 = [0u8; 4];
                read_exact(&mut cur, &mut b4, "data")?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
        }
        DType::F64 => {
            for _ in 0..numel {
                let mut b8 = [0u8; 8];
                read_exact(&mut cur, &mut b8, "data")?;
                data.push(f64::from_le_bytes(b8));
            }
        }
    }
    if !cur.is_empty() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after TNS1 payload",
            cur.len()
        )));
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(buf)
        .map_err(|_| Error::Validation(format!("truncated TNS1 file while reading {what}")))
}

pub fn write(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = to_bytes(t, dtype);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
