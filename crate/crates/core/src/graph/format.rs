//! Binary model file.
//!
//! Little-endian throughout:
//!
//! ```text
//! header   "PBIT" | version u32 | layer_count u32 | n h w c u32 x4
//!          | payload_len u64 | crc32 u32
//! payload  layer records, back to back
//! record   kind u32 | flags u32 | body
//! ```
//!
//! Weighted kinds (1 first-conv, 2 conv, 3 dense, 5 output-conv,
//! 6 output-dense) carry eight u32 geometry fields, a u64 word count, the
//! packed 64-bit weight words, `out` f32 biases and then gamma, beta, mean and
//! sigma arrays (always for binary kinds, only when flag bit 0 is set for
//! output kinds). For binary conv and dense, flag bit 0 marks the integrated
//! packing plan. Pool records (kind 4) carry four u32 window/stride fields.
//!
//! The CRC-32 covers the first 36 header bytes followed by the payload, so any
//! single damaged byte is detected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{BnParams, ConvGeometry, FirstConvLayer, FusedConvLayer, OutputConvLayer, PoolGeometry};
use crate::tensor::{BitTensor, Shape};

use super::{Layer, NetworkGraph};

pub const MAGIC: [u8; 4] = *b"PBIT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

const KIND_FIRST_CONV: u32 = 1;
const KIND_CONV: u32 = 2;
const KIND_DENSE: u32 = 3;
const KIND_POOL: u32 = 4;
const KIND_OUTPUT_CONV: u32 = 5;
const KIND_OUTPUT_DENSE: u32 = 6;
const FLAG_BIT0: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn geometry(&mut self, g: &ConvGeometry) {
        for v in [g.kernel_h, g.kernel_w, g.stride_h, g.stride_w, g.pad_h, g.pad_w, g.in_channels, g.out_channels] {
            self.u32(v);
        }
    }

    fn weights(&mut self, w: &BitTensor) {
        self.0.extend_from_slice(&(w.words().len() as u64).to_le_bytes());
        for word in w.words() {
            self.0.extend_from_slice(&word.to_le_bytes());
        }
    }

    fn bn(&mut self, bn: &BnParams) {
        self.f32s(&bn.gamma);
        self.f32s(&bn.beta);
        self.f32s(&bn.mean);
        self.f32s(&bn.sigma);
    }
}

fn encode_layer(w: &mut Writer, layer: &Layer) {
    match layer {
        Layer::FirstConv(l) => {
            w.u32(KIND_FIRST_CONV as usize);
            w.u32(0);
            w.geometry(l.geometry());
            w.weights(l.weights());
            w.f32s(l.bias());
            w.bn(l.bn());
        }
        Layer::Conv(l) | Layer::Dense(l) => {
            w.u32(if matches!(layer, Layer::Conv(_)) { KIND_CONV } else { KIND_DENSE } as usize);
            w.u32(if l.pack_integrated() { FLAG_BIT0 } else { 0 } as usize);
            w.geometry(l.geometry());
            w.weights(l.weights());
            w.f32s(l.bias());
            w.bn(l.bn());
        }
        Layer::Pool(g) => {
            w.u32(KIND_POOL as usize);
            w.u32(0);
            for v in [g.window_h, g.window_w, g.stride_h, g.stride_w] {
                w.u32(v);
            }
        }
        Layer::Output(l) | Layer::OutputDense(l) => {
            w.u32(if matches!(layer, Layer::Output(_)) { KIND_OUTPUT_CONV } else { KIND_OUTPUT_DENSE } as usize);
            w.u32(if l.bn().is_some() { FLAG_BIT0 } else { 0 } as usize);
            w.geometry(l.geometry());
            w.weights(l.weights());
            w.f32s(l.bias());
            if let Some(bn) = l.bn() {
                w.bn(bn);
            }
        }
    }
}

fn checksum(header: &[u8], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(header);
    h.update(payload);
    h.finalize()
}

impl NetworkGraph {
    /// Deterministic serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Writer(Vec::new());
        for layer in &self.layers {
            encode_layer(&mut payload, layer);
        }
        let payload = payload.0;
        let mut out = Writer(Vec::with_capacity(HEADER_LEN + payload.len()));
        out.0.extend_from_slice(&MAGIC);
        out.u32(VERSION as usize);
        out.u32(self.layers.len());
        let s = self.input_shape;
        for v in [s.n, s.h, s.w, s.c] {
            out.u32(v);
        }
        out.0.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.0.extend_from_slice(&checksum(&out.0, &payload).to_le_bytes());
        out.0.extend_from_slice(&payload);
        out.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len())));
        }
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PBIT model".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let layer_count = r.u32()? as usize;
        let shape = Shape::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?)
            .map_err(|e| Error::Format(format!("input shape: {e}")))?;
        let payload_len = r.u64()?;
        let crc = r.u32()?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != payload_len {
            return Err(Error::Format(format!("payload is {} bytes, header says {payload_len}", payload.len())));
        }
        if checksum(&bytes[..HEADER_LEN - 4], payload) != crc {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let mut layers = Vec::with_capacity(layer_count.min(1024));
        for index in 0..layer_count {
            layers.push(decode_layer(&mut r, index)?);
        }
        if r.pos != payload.len() {
            return Err(Error::Format(format!("{} trailing payload bytes", payload.len() - r.pos)));
        }
        NetworkGraph::from_layers(shape, layers)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("unexpected end of data at offset {} reading {n} bytes", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }

    fn geometry(&mut self) -> Result<ConvGeometry> {
        let g = ConvGeometry {
            kernel_h: self.usize()?,
            kernel_w: self.usize()?,
            stride_h: self.usize()?,
            stride_w: self.usize()?,
            pad_h: self.usize()?,
            pad_w: self.usize()?,
            in_channels: self.usize()?,
            out_channels: self.usize()?,
        };
        g.validate().map_err(|e| Error::Format(format!("geometry: {e}")))?;
        Ok(g)
    }

    fn weights(&mut self, g: &ConvGeometry) -> Result<BitTensor> {
        let shape = g.weight_shape();
        let expected = shape.pixels() as u64 * shape.c.div_ceil(64) as u64;
        let count = self.u64()?;
        if count != expected {
            return Err(Error::Format(format!("{count} weight words, geometry needs {expected}")));
        }
        let raw = self.take(count as usize * 8)?;
        let words = raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        BitTensor::from_words(shape, words).map_err(|e| Error::Format(format!("weights: {e}")))
    }

    fn bn(&mut self, c: usize) -> Result<BnParams> {
        Ok(BnParams { gamma: self.f32s(c)?, beta: self.f32s(c)?, mean: self.f32s(c)?, sigma: self.f32s(c)? })
    }
}

fn decode_layer(r: &mut Reader, index: usize) -> Result<Layer> {
    let kind = r.u32()?;
    let flags = r.u32()?;
    let allowed = match kind {
        KIND_CONV | KIND_DENSE | KIND_OUTPUT_CONV | KIND_OUTPUT_DENSE => FLAG_BIT0,
        _ => 0,
    };
    if flags & !allowed != 0 {
        return Err(Error::Format(format!("layer {index}: unknown flags {flags:#x}")));
    }
    // Parameter problems surface as their own error kinds (e.g. prunable channels).
    Ok(match kind {
        KIND_FIRST_CONV | KIND_CONV | KIND_DENSE => {
            let g = r.geometry()?;
            let weights = r.weights(&g)?;
            let bias = r.f32s(g.out_channels)?;
            let bn = r.bn(g.out_channels)?;
            match kind {
                KIND_FIRST_CONV => Layer::FirstConv(FirstConvLayer::new(index, g, weights, bias, bn)?),
                _ => {
                    let mut l = FusedConvLayer::new(index, g, weights, bias, bn, usize::MAX)?;
                    l.pack_integrated = flags & FLAG_BIT0 != 0;
                    if kind == KIND_CONV {
                        Layer::Conv(l)
                    } else {
                        Layer::Dense(l)
                    }
                }
            }
        }
        KIND_POOL => {
            let g = PoolGeometry { window_h: r.usize()?, window_w: r.usize()?, stride_h: r.usize()?, stride_w: r.usize()? };
            g.validate().map_err(|e| Error::Format(format!("layer {index}: {e}")))?;
            Layer::Pool(g)
        }
        KIND_OUTPUT_CONV | KIND_OUTPUT_DENSE => {
            let g = r.geometry()?;
            let weights = r.weights(&g)?;
            let bias = r.f32s(g.out_channels)?;
            let bn = if flags & FLAG_BIT0 != 0 { Some(r.bn(g.out_channels)?) } else { None };
            let l = OutputConvLayer::new(g, weights, bias, bn)?;
            if kind == KIND_OUTPUT_CONV {
                Layer::Output(l)
            } else {
                Layer::OutputDense(l)
            }
        }
        other => return Err(Error::Format(format!("layer {index}: unknown kind tag {other}"))),
    })
}

pub fn save(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = graph.to_bytes();
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<NetworkGraph> {
    NetworkGraph::from_bytes(&std::fs::read(path)?)
}

/// Size in bytes of the same network stored with one f32 per weight and the
/// same header and record framing.
pub fn float32_size(graph: &NetworkGraph) -> u64 {
    let mut total = HEADER_LEN as u64;
    for layer in graph.layers() {
        total += 8;
        let (g, bn_arrays) = match layer {
            Layer::Pool(_) => {
                total += 16;
                continue;
            }
            Layer::FirstConv(l) => (*l.geometry(), 4),
            Layer::Conv(l) | Layer::Dense(l) => (*l.geometry(), 4),
            Layer::Output(l) | Layer::OutputDense(l) => (*l.geometry(), if l.bn().is_some() { 4 } else { 0 }),
        };
        let weights = g.weight_shape().len() as u64;
        let params = (1 + bn_arrays) * g.out_channels as u64;
        total += 32 + 8 + 4 * (weights + params);
    }
    total
}
