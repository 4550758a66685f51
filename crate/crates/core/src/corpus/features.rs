//! `EMOF` feature files: `"EMOF"`, version, rows and columns as little-endian
//! `u32`, then `rows × cols` little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMOF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(m: &Array2<f32>) -> Vec<u8> {
    let (t, d) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let bad = |reason: String| Error::FeatureFormat { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing EMOF magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {t}x{d}, found {}", bytes.len())));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((t, d), data).expect("length checked"))
}

pub fn write(path: &Path, m: &Array2<f32>) -> Result<()> {
    fs::write(path, encode(m)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
