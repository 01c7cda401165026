//! Benchmark topologies with random weights.
//!
//! The layer sequences follow AlexNet, VGG16 and YOLOv2-Tiny. Spatial input
//! size and the width of the final layer are parameters so the same topology
//! can be run at full or reduced resolution.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BnParams, ConvGeometry, FirstConvLayer, FusedConvLayer, OutputConvLayer, PoolGeometry, DEFAULT_PACK_THRESHOLD};
use crate::tensor::{BitTensor, Shape};

use super::{Layer, NetworkGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    AlexNet,
    Vgg16,
    Yolov2Tiny,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::AlexNet, Arch::Vgg16, Arch::Yolov2Tiny];

    /// Input resolution and output width of the original network.
    pub fn full_size(self) -> (usize, usize) {
        match self {
            Arch::AlexNet => (227, 1000),
            Arch::Vgg16 => (224, 1000),
            Arch::Yolov2Tiny => (416, 125),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::AlexNet => "alexnet",
            Arch::Vgg16 => "vgg16",
            Arch::Yolov2Tiny => "yolov2-tiny",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alexnet" => Ok(Arch::AlexNet),
            "vgg16" => Ok(Arch::Vgg16),
            "yolov2-tiny" | "yolov2tiny" | "tiny-yolo" => Ok(Arch::Yolov2Tiny),
            other => Err(Error::InvalidParameter(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Conv { k: usize, s: usize, p: usize, out: usize },
    Pool { w: usize, s: usize },
    Dense { out: usize },
    OutConv { k: usize },
    OutDense { bn: bool },
}

fn topology(arch: Arch) -> Vec<Block> {
    use Block::*;
    let conv3 = |out| Conv { k: 3, s: 1, p: 1, out };
    match arch {
        Arch::AlexNet => vec![
            Conv { k: 11, s: 4, p: 2, out: 96 },
            Pool { w: 3, s: 2 },
            Conv { k: 5, s: 1, p: 2, out: 256 },
            Pool { w: 3, s: 2 },
            conv3(384),
            conv3(384),
            conv3(256),
            Pool { w: 3, s: 2 },
            Dense { out: 4096 },
            Dense { out: 4096 },
            OutDense { bn: true },
        ],
        Arch::Vgg16 => {
            let mut v = Vec::new();
            for (reps, width) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
                v.extend(std::iter::repeat_n(conv3(width), reps));
                v.push(Pool { w: 2, s: 2 });
            }
            v.extend([Dense { out: 4096 }, Dense { out: 4096 }, OutDense { bn: false }]);
            v
        }
        Arch::Yolov2Tiny => {
            let mut v = Vec::new();
            for width in [16, 32, 64, 128, 256] {
                v.push(conv3(width));
                v.push(Pool { w: 2, s: 2 });
            }
            v.extend([conv3(512), Pool { w: 2, s: 1 }, conv3(1024), conv3(1024), OutConv { k: 1 }]);
            v
        }
    }
}

fn random_weights(rng: &mut ChaCha8Rng, g: &ConvGeometry) -> BitTensor {
    let shape = g.weight_shape();
    let wpp = shape.c.div_ceil(64);
    let tail = shape.c % 64;
    let mut words: Vec<u64> = (0..shape.pixels() * wpp).map(|_| rng.gen()).collect();
    if tail != 0 {
        for px in words.chunks_exact_mut(wpp) {
            px[wpp - 1] &= (1u64 << tail) - 1;
        }
    }
    BitTensor::from_words(shape, words).expect("masked random weights are valid")
}

/// Statistics that put the threshold within about one standard deviation of
/// the accumulator, so both output values occur.
fn random_bn(rng: &mut ChaCha8Rng, channels: usize, spread: f64) -> BnParams {
    let mut bn = BnParams::identity(channels);
    for o in 0..channels {
        let magnitude = rng.gen_range(0.25..2.0);
        bn.gamma[o] = if rng.gen() { magnitude } else { -magnitude };
        bn.beta[o] = rng.gen_range(-1.0..1.0);
        bn.mean[o] = (rng.gen_range(-0.5..0.5) * spread) as f32;
        bn.sigma[o] = rng.gen_range(0.5..2.0);
    }
    bn
}

fn random_bias(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f32> {
    (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Builds `arch` for `input_hw x input_hw x 3` images with `outputs` final
/// channels and deterministic random parameters.
pub fn random_graph(arch: Arch, input_hw: usize, outputs: usize, seed: u64) -> Result<NetworkGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Shape::new(1, input_hw, input_hw, 3)?;
    let mut shape = input;
    let mut layers = Vec::new();
    for (index, block) in topology(arch).into_iter().enumerate() {
        let layer = match block {
            Block::Conv { k, s, p, out } => {
                let g = ConvGeometry::square(k, s, p, shape.c, out);
                let w = random_weights(&mut rng, &g);
                let bias = random_bias(&mut rng, out);
                if index == 0 {
                    // bytes average ~147 in RMS for uniform input
                    let bn = random_bn(&mut rng, out, 147.0 * (g.fan_in() as f64).sqrt());
                    Layer::FirstConv(FirstConvLayer::new(index, g, w, bias, bn)?)
                } else {
                    let bn = random_bn(&mut rng, out, (g.fan_in() as f64).sqrt());
                    Layer::Conv(FusedConvLayer::new(index, g, w, bias, bn, DEFAULT_PACK_THRESHOLD)?)
                }
            }
            Block::Dense { out } => {
                let g = ConvGeometry::dense(shape.flattened().c, out);
                let w = random_weights(&mut rng, &g);
                let bias = random_bias(&mut rng, out);
                let bn = random_bn(&mut rng, out, (g.fan_in() as f64).sqrt());
                Layer::Dense(FusedConvLayer::new(index, g, w, bias, bn, DEFAULT_PACK_THRESHOLD)?)
            }
            Block::Pool { w, s } => Layer::Pool(PoolGeometry::square(w, s)),
            Block::OutConv { k, .. } => {
                let g = ConvGeometry::square(k, 1, 0, shape.c, outputs);
                let w = random_weights(&mut rng, &g);
                Layer::Output(OutputConvLayer::new(g, w, random_bias(&mut rng, outputs), None)?)
            }
            Block::OutDense { bn } => {
                let g = ConvGeometry::dense(shape.flattened().c, outputs);
                let w = random_weights(&mut rng, &g);
                let bias = random_bias(&mut rng, outputs);
                let bn = bn.then(|| {
                    let mut p = random_bn(&mut rng, outputs, (g.fan_in() as f64).sqrt());
                    p.gamma.iter_mut().for_each(|x| *x = x.abs());
                    p
                });
                Layer::OutputDense(OutputConvLayer::new(g, w, bias, bn)?)
            }
        };
        shape = match &layer {
            Layer::Pool(g) => g.output_shape(shape),
            Layer::Dense(l) => l.geometry().output_shape(shape.flattened())?,
            Layer::OutputDense(l) => l.geometry().output_shape(shape.flattened())?,
            Layer::FirstConv(l) => l.geometry().output_shape(shape)?,
            Layer::Conv(l) => l.geometry().output_shape(shape)?,
            Layer::Output(l) => l.geometry().output_shape(shape)?,
        };
        layers.push(layer);
    }
    NetworkGraph::from_layers(input, layers)
}
