//! Tensor serialization: a flat binary format plus a lossless JSON debug form.
//!
//! Binary layout: magic `FSNT`, version `u32`, four `u32` dims (N, C, H, W),
//! a `u32` dtype code, then the values, all little-endian. The engine is
//! 64-bit; 32-bit files are widened on read.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FSNT_MAGIC: [u8; 4] = *b"FSNT";
pub const FSNT_VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 0;
pub const DTYPE_F32: u32 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&FSNT_MAGIC)?;
    w.write_all(&FSNT_VERSION.to_le_bytes())?;
    for d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Dimension(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FSNT_MAGIC {
        return Err(Error::Parse(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FSNT_VERSION {
        return Err(Error::Parse(format!("unsupported version {version}")));
    }
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = read_u32(r)? as usize;
    }
    let dtype = read_u32(r)?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DTYPE_F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        DTYPE_F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        other => return Err(Error::Parse(format!("unknown dtype code {other}"))),
    }
    Tensor::from_vec(shape, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: [usize; 4],
    dtype: String,
    data: Vec<f64>,
}

/// Lossless JSON debug form (shortest-roundtrip float formatting).
pub fn tensor_to_json(t: &Tensor) -> String {
    serde_json::to_string(&TensorJson {
        shape: t.shape(),
        dtype: "f64".into(),
        data: t.data().to_vec(),
    })
    .expect("tensor JSON serialization cannot fail")
}

pub fn tensor_from_json(s: &str) -> Result<Tensor> {
    let parsed: TensorJson = serde_json::from_str(s)?;
    if parsed.dtype != "f64" && parsed.dtype != "f32" {
        return Err(Error::Parse(format!("unknown dtype {}", parsed.dtype)));
    }
    Tensor::from_vec(parsed.shape, parsed.data)
}
