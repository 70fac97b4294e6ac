use std::path::Path;

use crate::error::Result;
use crate::io::{read_file, write_file, Reader};
use crate::tensor::Tensor;

pub const MATRIX_MAGIC: &[u8; 4] = b"RSHD";
pub const MATRIX_VERSION: u16 = 1;
const DTYPE_F64: u16 = 1;

/// `RSHD | version u16 | dtype u16 | rank u32 | dims u64... | f64 payload`.
pub fn encode_matrix(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Tensor> {
    if r.take(4)? != MATRIX_MAGIC {
        return r.fail("bad magic, expected RSHD");
    }
    let version = r.u16()?;
    if version != MATRIX_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let dtype = r.u16()?;
    if dtype != DTYPE_F64 {
        return r.fail(format!("unsupported dtype tag {dtype}"));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return r.fail(format!("unsupported rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = r.u64()?;
        if d == 0 {
            return r.fail("zero-length dimension");
        }
        let d = usize::try_from(d).or_else(|_| r.fail("dimension too large"))?;
        numel = match numel.checked_mul(d) {
            Some(n) => n,
            None => return r.fail("element count overflows"),
        };
        shape.push(d);
    }
    let bytes = match numel.checked_mul(8) {
        Some(b) => b,
        None => return r.fail("payload size overflows"),
    };
    let payload = r.take(bytes)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Parses a complete matrix file; trailing bytes are an error.
pub fn decode_matrix(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "matrix file");
    let t = decode_from(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn write_matrix(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_file(path.as_ref(), &encode_matrix(t))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_matrix(&read_file(path.as_ref())?)
}
