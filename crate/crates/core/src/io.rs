//! `TNS1` binary tensor files.
//!
//! Layout: the magic bytes `TNS1`, four little-endian `u32` extents
//! `(B, C, H, W)`, then `B*C*H*W` little-endian IEEE-754 `f32` values in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TNS1";
const HEADER_LEN: usize = 4 + 4 * 4;

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic, expected TNS1".into());
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape(dims);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * shape.numel() {
        return Err(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            body.len(),
            4 * shape.numel()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data).map_err(|e| e.to_string())
}

pub fn write_tns<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tns(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}
