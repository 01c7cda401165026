#![allow(dead_code)]

use pbit::layers::{BnParams, ConvGeometry, FusedConvLayer};
use pbit::oracle::RefTensor;
use pbit::{BitTensor, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn signs(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

/// Random packed tensor together with its ±1 reference copy.
pub fn random_bits(rng: &mut impl Rng, shape: Shape) -> (BitTensor, RefTensor) {
    let s = signs(rng, shape.len());
    let bits = BitTensor::pack_channels(shape, &s).unwrap();
    let reference = RefTensor::new(shape, s.iter().map(|&v| f64::from(v)).collect()).unwrap();
    (bits, reference)
}

pub fn random_bias(rng: &mut impl Rng, c: usize) -> Vec<f32> {
    (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Continuous statistics centred near the accumulator range of `fan_in`.
pub fn random_bn(rng: &mut impl Rng, c: usize, fan_in: usize) -> BnParams {
    let spread = (fan_in as f32).sqrt();
    BnParams {
        gamma: (0..c).map(|_| rng.gen_range(0.1..2.0) * if rng.gen() { 1.0 } else { -1.0 }).collect(),
        beta: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        mean: (0..c).map(|_| rng.gen_range(-spread..spread)).collect(),
        sigma: (0..c).map(|_| rng.gen_range(0.1..3.0)).collect(),
    }
}

pub fn random_geometry(rng: &mut impl Rng, max_in: usize, max_out: usize) -> ConvGeometry {
    let k = rng.gen_range(1..=3);
    ConvGeometry {
        kernel_h: k,
        kernel_w: rng.gen_range(1..=3),
        stride_h: rng.gen_range(1..=2),
        stride_w: rng.gen_range(1..=2),
        pad_h: rng.gen_range(0..=1),
        pad_w: rng.gen_range(0..=1),
        in_channels: rng.gen_range(1..=max_in),
        out_channels: rng.gen_range(1..=max_out),
    }
}

pub fn random_input_shape(rng: &mut impl Rng, g: &ConvGeometry) -> Shape {
    Shape::new(rng.gen_range(1..=2), rng.gen_range(3..=7), rng.gen_range(3..=7), g.in_channels).unwrap()
}

pub fn random_layer(rng: &mut impl Rng, g: ConvGeometry, threshold: usize) -> (FusedConvLayer, RefTensor) {
    let (w, wr) = random_bits(rng, g.weight_shape());
    let bias = random_bias(rng, g.out_channels);
    let bn = random_bn(rng, g.out_channels, g.fan_in());
    (FusedConvLayer::new(0, g, w, bias, bn, threshold).unwrap(), wr)
}

/// Dyadic bias and batch-norm parameters whose threshold is exactly `target`
/// for every channel, so `x1 == target` is a true tie in both paths.
pub fn tie_params(rng: &mut impl Rng, targets: &[f64], gamma_positive: &[bool]) -> (Vec<f32>, BnParams) {
    let c = targets.len();
    let mut bias = Vec::with_capacity(c);
    let mut bn = BnParams::identity(c);
    for o in 0..c {
        let gamma = 2f64.powi(rng.gen_range(-2..=2)) * if gamma_positive[o] { 1.0 } else { -1.0 };
        let sigma = 2f64.powi(rng.gen_range(-2..=2));
        let beta = f64::from(rng.gen_range(-16i32..=16)) / 8.0;
        let b = f64::from(rng.gen_range(-16i32..=16)) / 8.0;
        let mean = targets[o] + beta * sigma / gamma + b;
        bias.push(b as f32);
        bn.gamma[o] = gamma as f32;
        bn.sigma[o] = sigma as f32;
        bn.beta[o] = beta as f32;
        bn.mean[o] = mean as f32;
        assert_eq!(f64::from(bn.mean[o]), mean, "tie parameters must be exact in f32");
    }
    (bias, bn)
}
