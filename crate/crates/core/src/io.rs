//! Tensor files used by the command-line tools.
//!
//! Images: `"PBIM"`, then `n h w c` as little-endian u32, then `n*h*w*c`
//! bytes in NHWC order. Outputs: `"PBFT"`, the same shape fields, then
//! little-endian f32 values in NHWC order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ByteTensor, FloatTensor, Shape};

pub const IMAGE_MAGIC: [u8; 4] = *b"PBIM";
pub const OUTPUT_MAGIC: [u8; 4] = *b"PBFT";
const HEADER_LEN: usize = 20;

fn header(magic: [u8; 4], s: Shape) -> Vec<u8> {
    let mut out = magic.to_vec();
    for v in [s.n, s.h, s.w, s.c] {
        out.extend_from_slice(&u32::try_from(v).expect("dimension fits in u32").to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8], magic: [u8; 4], what: &str) -> Result<Shape> {
    if bytes.len() < HEADER_LEN || bytes[..4] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    Shape::new(dim(0), dim(1), dim(2), dim(3)).map_err(|e| Error::Format(format!("{what} shape: {e}")))
}

pub fn encode_image(img: &ByteTensor) -> Vec<u8> {
    let mut out = header(IMAGE_MAGIC, img.shape());
    out.extend_from_slice(img.data());
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<ByteTensor> {
    let shape = parse_header(bytes, IMAGE_MAGIC, "image")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != shape.len() {
        return Err(Error::Format(format!("image body is {} bytes, shape {shape} needs {}", body.len(), shape.len())));
    }
    ByteTensor::new(shape, body.to_vec())
}

pub fn encode_output(t: &FloatTensor) -> Vec<u8> {
    let mut out = header(OUTPUT_MAGIC, t.shape());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_output(bytes: &[u8]) -> Result<FloatTensor> {
    let shape = parse_header(bytes, OUTPUT_MAGIC, "output")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != shape.len() * 4 {
        return Err(Error::Format(format!("output body is {} bytes, shape {shape} needs {}", body.len(), shape.len() * 4)));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    FloatTensor::new(shape, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ByteTensor> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, img: &ByteTensor) -> Result<()> {
    Ok(std::fs::write(path, encode_image(img))?)
}

pub fn read_output(path: impl AsRef<Path>) -> Result<FloatTensor> {
    decode_output(&std::fs::read(path)?)
}

pub fn write_output(path: impl AsRef<Path>, t: &FloatTensor) -> Result<()> {
    Ok(std::fs::write(path, encode_output(t))?)
}
