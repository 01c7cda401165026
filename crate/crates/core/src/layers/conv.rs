use crate::error::{dim_err, Error, Result};
use crate::exec::for_each_chunk;
use crate::kernels::PopcountBackend;
use crate::tensor::{BitTensor, ByteTensor, Shape, Word};

use super::{binarize, check_channel_vec, check_weights, plane_window, xor_window, BnParams, ConvGeometry, Window};

/// Input-channel count up to which eight filters are evaluated per task and
/// packed in registers.
pub const DEFAULT_PACK_THRESHOLD: usize = 256;

/// How a binary layer turns per-channel decisions into packed words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionPlan {
    /// Each task evaluates eight filters and writes their bits as one byte.
    Integrated,
    /// Each filter writes a 0/1 byte; a second pass packs the bytes.
    SeparatePack,
}

/// Binary convolution with bias, batch norm and sign folded into a
/// per-channel threshold `xi` and the sign of gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConvLayer<W: Word = u64> {
    pub(crate) geometry: ConvGeometry,
    pub(crate) weights: BitTensor<W>,
    pub(crate) xi: Vec<f64>,
    pub(crate) gamma_positive: Vec<bool>,
    pub(crate) pack_integrated: bool,
    pub(crate) bias: Vec<f32>,
    pub(crate) bn: BnParams,
}

/// First layer: consumes 8-bit images through their bit planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstConvLayer<W: Word = u64> {
    pub(crate) geometry: ConvGeometry,
    pub(crate) weights: BitTensor<W>,
    pub(crate) xi: Vec<f64>,
    pub(crate) gamma_positive: Vec<bool>,
    pub(crate) bias: Vec<f32>,
    pub(crate) bn: BnParams,
}

/// `xi = mu - beta * sigma / gamma - b`, evaluated in double precision.
pub(crate) fn fold_thresholds(layer: usize, bias: &[f32], bn: &BnParams) -> Result<(Vec<f64>, Vec<bool>)> {
    bn.validate(bias.len())?;
    let mut xi = Vec::with_capacity(bias.len());
    let mut gamma_positive = Vec::with_capacity(bias.len());
    for (o, &b) in bias.iter().enumerate() {
        let gamma = f64::from(bn.gamma[o]);
        if gamma == 0.0 {
            return Err(Error::PrunableChannel { layer, channel: o });
        }
        if !b.is_finite() {
            return Err(Error::InvalidParameter(format!("bias[{o}] is not finite")));
        }
        let t = f64::from(bn.mean[o]) - f64::from(bn.beta[o]) * f64::from(bn.sigma[o]) / gamma - f64::from(b);
        if !t.is_finite() {
            return Err(Error::InvalidParameter(format!("threshold for channel {o} is not finite")));
        }
        xi.push(t);
        gamma_positive.push(gamma > 0.0);
    }
    Ok((xi, gamma_positive))
}

macro_rules! threshold_accessors {
    () => {
        pub fn geometry(&self) -> &ConvGeometry {
            &self.geometry
        }

        pub fn weights(&self) -> &BitTensor<W> {
            &self.weights
        }

        pub fn xi(&self) -> &[f64] {
            &self.xi
        }

        pub fn gamma_positive(&self) -> &[bool] {
            &self.gamma_positive
        }

        /// Bias the thresholds were folded from.
        pub fn bias(&self) -> &[f32] {
            &self.bias
        }

        /// Batch-norm statistics the thresholds were folded from.
        pub fn bn(&self) -> &BnParams {
            &self.bn
        }

        /// Direct access to the folded thresholds, for fault-injection tests.
        #[doc(hidden)]
        pub fn xi_mut(&mut self) -> &mut [f64] {
            &mut self.xi
        }
    };
}

impl<W: Word> FusedConvLayer<W> {
    /// Folds `bias` and `bn` into thresholds. `layer` is only used in error
    /// reports.
    pub fn new(
        layer: usize,
        geometry: ConvGeometry,
        weights: BitTensor<W>,
        bias: Vec<f32>,
        bn: BnParams,
        pack_threshold: usize,
    ) -> Result<Self> {
        check_weights(&geometry, &weights)?;
        check_channel_vec("bias", &bias, geometry.out_channels)?;
        let (xi, gamma_positive) = fold_thresholds(layer, &bias, &bn)?;
        let mut layer = FusedConvLayer { geometry, weights, xi, gamma_positive, pack_integrated: true, bias, bn };
        layer.pack_integrated = schedule_conv(&layer, pack_threshold) == ExecutionPlan::Integrated;
        Ok(layer)
    }

    threshold_accessors!();

    pub fn pack_integrated(&self) -> bool {
        self.pack_integrated
    }

    pub fn plan(&self) -> ExecutionPlan {
        if self.pack_integrated {
            ExecutionPlan::Integrated
        } else {
            ExecutionPlan::SeparatePack
        }
    }

    pub fn to_lanes<V: Word>(&self) -> FusedConvLayer<V> {
        FusedConvLayer {
            geometry: self.geometry,
            weights: self.weights.to_lanes(),
            xi: self.xi.clone(),
            gamma_positive: self.gamma_positive.clone(),
            pack_integrated: self.pack_integrated,
            bias: self.bias.clone(),
            bn: self.bn.clone(),
        }
    }
}

impl<W: Word> FirstConvLayer<W> {
    pub fn new(layer: usize, geometry: ConvGeometry, weights: BitTensor<W>, bias: Vec<f32>, bn: BnParams) -> Result<Self> {
        check_weights(&geometry, &weights)?;
        check_channel_vec("bias", &bias, geometry.out_channels)?;
        let (xi, gamma_positive) = fold_thresholds(layer, &bias, &bn)?;
        Ok(FirstConvLayer { geometry, weights, xi, gamma_positive, bias, bn })
    }

    threshold_accessors!();
}

/// Picks the packing strategy for a layer: integrated while the input has at
/// most `pack_threshold` channels.
pub fn schedule_conv<W: Word>(layer: &FusedConvLayer<W>, pack_threshold: usize) -> ExecutionPlan {
    if layer.geometry.in_channels <= pack_threshold {
        ExecutionPlan::Integrated
    } else {
        ExecutionPlan::SeparatePack
    }
}

/// Evaluates `bit(n, window, o)` for every output element and packs the
/// results along channels.
fn emit_bits<W, F>(g: &ConvGeometry, input: Shape, plan: ExecutionPlan, bit: F) -> Result<BitTensor<W>>
where
    W: Word,
    F: Fn(usize, &Window, usize) -> bool + Sync + Send,
{
    let out_shape = g.output_shape(input)?;
    let (oh, ow, oc) = (out_shape.h, out_shape.w, out_shape.c);
    let wpp = oc.div_ceil(W::BITS);
    let mut data = vec![W::ZERO; out_shape.pixels() * wpp];
    match plan {
        ExecutionPlan::Integrated => {
            for_each_chunk(&mut data, ow * wpp, |row, chunk| {
                let (n, oy) = (row / oh, row % oh);
                for (ox, words) in chunk.chunks_exact_mut(wpp).enumerate() {
                    let win = g.window(input.h, input.w, oy, ox);
                    for group in (0..oc).step_by(8) {
                        let mut byte = 0u64;
                        for j in 0..(oc - group).min(8) {
                            byte |= u64::from(bit(n, &win, group + j)) << j;
                        }
                        let k = group / W::BITS;
                        words[k] = words[k] | W::from_u64(byte << (group % W::BITS));
                    }
                }
            });
        }
        ExecutionPlan::SeparatePack => {
            let mut bytes = vec![0u8; out_shape.len()];
            for_each_chunk(&mut bytes, ow * oc, |row, chunk| {
                let (n, oy) = (row / oh, row % oh);
                for (ox, px) in chunk.chunks_exact_mut(oc).enumerate() {
                    let win = g.window(input.h, input.w, oy, ox);
                    for (o, b) in px.iter_mut().enumerate() {
                        *b = u8::from(bit(n, &win, o));
                    }
                }
            });
            for_each_chunk(&mut data, ow * wpp, |row, chunk| {
                let src = &bytes[row * ow * oc..][..ow * oc];
                for (words, px) in chunk.chunks_exact_mut(wpp).zip(src.chunks_exact(oc)) {
                    for (o, &b) in px.iter().enumerate() {
                        if b != 0 {
                            words[o / W::BITS] = words[o / W::BITS].with_bit(o % W::BITS);
                        }
                    }
                }
            });
        }
    }
    Ok(BitTensor::from_parts_unchecked(out_shape, data))
}

/// Fused binary convolution using the layer's scheduled plan.
pub fn fused_binary_conv<W: Word>(input: &BitTensor<W>, layer: &FusedConvLayer<W>) -> Result<BitTensor<W>> {
    fused_binary_conv_planned(input, layer, layer.plan())
}

pub fn fused_binary_conv_planned<W: Word>(
    input: &BitTensor<W>,
    layer: &FusedConvLayer<W>,
    plan: ExecutionPlan,
) -> Result<BitTensor<W>> {
    let shape = input.shape();
    if shape.c != layer.geometry.in_channels {
        return dim_err(format!("input has {} channels, layer expects {}", shape.c, layer.geometry.in_channels));
    }
    let pop = PopcountBackend::detect();
    emit_bits(&layer.geometry, shape, plan, |n, win, o| {
        let x1 = xor_window(pop, input, n, win, &layer.weights, o);
        binarize(x1, layer.xi[o], layer.gamma_positive[o])
    })
}

/// Fully connected binary layer. The input is flattened in NHWC order and
/// `layer` must have 1x1 geometry over the flattened length.
pub fn binary_dense<W: Word>(input: &BitTensor<W>, layer: &FusedConvLayer<W>) -> Result<BitTensor<W>> {
    let g = &layer.geometry;
    if g.kernel_h != 1 || g.kernel_w != 1 {
        return dim_err("dense layers need 1x1 geometry");
    }
    let flat = input.shape().flattened();
    if flat.c != g.in_channels {
        return dim_err(format!("flattened input has {} features, layer expects {}", flat.c, g.in_channels));
    }
    fused_binary_conv(&input.flatten(), layer)
}

/// First-layer convolution over an 8-bit image, thresholded like
/// [`fused_binary_conv`].
pub fn first_layer_conv<W: Word>(img: &ByteTensor, layer: &FirstConvLayer<W>) -> Result<BitTensor<W>> {
    let shape = img.shape();
    if shape.c != layer.geometry.in_channels {
        return dim_err(format!("image has {} channels, layer expects {}", shape.c, layer.geometry.in_channels));
    }
    let planes = img.split_bitplanes::<W>();
    let pop = PopcountBackend::detect();
    emit_bits(&layer.geometry, shape, ExecutionPlan::Integrated, |n, win, o| {
        let s = plane_window(pop, &planes, n, win, &layer.weights, o);
        binarize(s, layer.xi[o], layer.gamma_positive[o])
    })
}
