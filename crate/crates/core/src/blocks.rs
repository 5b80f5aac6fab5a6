//! Flat binary parameter blocks shared by the cloud, extractor, and
//! checkpoint formats: an 8-byte magic, row/stride header, scalar width tag,
//! then little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BLOCK_MAGIC: &[u8; 8] = b"GBLK0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
    F32,
    F64,
}

impl Scalar {
    fn tag(self) -> u8 {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

pub fn write_block(path: impl AsRef<Path>, count: usize, stride: usize, scalar: Scalar, data: &[f64]) -> Result<()> {
    if data.len() != count * stride {
        return Err(Error::Validation(format!(
            "block payload {} does not match {count}x{stride}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(21 + data.len() * 8);
    out.extend_from_slice(BLOCK_MAGIC);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(stride as u32).to_le_bytes());
    out.push(scalar.tag());
    match scalar {
        Scalar::F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Scalar::F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_block(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 17 || &buf[0..8] != BLOCK_MAGIC {
        return Err(Error::Format("bad parameter block header".into()));
    }
    let count = u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]) as usize;
    let stride = u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]) as usize;
    let tag = buf[16];
    let n = count * stride;
    let payload = &buf[17..];
    let mut data = Vec::with_capacity(n);
    match tag {
        4 => {
            if payload.len() != n * 4 {
                return Err(Error::Length { expected: n * 4, actual: payload.len() });
            }
            for i in 0..n {
                let v = f32::from_le_bytes([
                    payload[4 * i],
                    payload[4 * i + 1],
                    payload[4 * i + 2],
                    payload[4 * i + 3],
                ]);
                data.push(v as f64);
            }
        }
        8 => {
            if payload.len() != n * 8 {
                return Err(Error::Length { expected: n * 8, actual: payload.len() });
            }
            for i in 0..n {
                let mut b = [0u8; 8];
                b.copy_from_slice(&payload[8 * i..8 * i + 8]);
                data.push(f64::from_le_bytes(b));
            }
        }
        other => return Err(Error::Format(format!("unknown scalar tag {other}"))),
    }
    Ok((count, stride, data))
}
