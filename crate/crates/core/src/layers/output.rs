use crate::error::{dim_err, Result};
use crate::exec::for_each_chunk;
use crate::kernels::PopcountBackend;
use crate::tensor::{BitTensor, ByteTensor, FloatTensor, Shape, Word};

use super::{check_channel_vec, check_weights, plane_window, xor_window, BnParams, ConvGeometry, Window};

/// Full-precision output layer: binary convolution followed by a real bias
/// and optional batch norm, without binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputConvLayer<W: Word = u64> {
    geometry: ConvGeometry,
    weights: BitTensor<W>,
    bias: Vec<f32>,
    bn: Option<BnParams>,
}

impl<W: Word> OutputConvLayer<W> {
    pub fn new(geometry: ConvGeometry, weights: BitTensor<W>, bias: Vec<f32>, bn: Option<BnParams>) -> Result<Self> {
        check_weights(&geometry, &weights)?;
        check_channel_vec("bias", &bias, geometry.out_channels)?;
        if let Some(i) = bias.iter().position(|b| !b.is_finite()) {
            return Err(crate::Error::InvalidParameter(format!("bias[{i}] is not finite")));
        }
        if let Some(bn) = &bn {
            bn.validate(geometry.out_channels)?;
        }
        Ok(OutputConvLayer { geometry, weights, bias, bn })
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn weights(&self) -> &BitTensor<W> {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bn(&self) -> Option<&BnParams> {
        self.bn.as_ref()
    }

    /// `x2 = x1 + b`, then `gamma * (x2 - mu) / sigma + beta` when batch norm
    /// is present.
    #[inline]
    fn affine(&self, x1: i32, o: usize) -> f32 {
        let x2 = f64::from(x1) + f64::from(self.bias[o]);
        match &self.bn {
            Some(bn) => {
                let (g, b, m, s) =
                    (f64::from(bn.gamma[o]), f64::from(bn.beta[o]), f64::from(bn.mean[o]), f64::from(bn.sigma[o]));
                (g * (x2 - m) / s + b) as f32
            }
            None => x2 as f32,
        }
    }

    fn emit<F>(&self, input: Shape, acc: F) -> Result<FloatTensor>
    where
        F: Fn(usize, &Window, usize) -> i32 + Sync + Send,
    {
        let g = &self.geometry;
        let out = g.output_shape(input)?;
        let oc = out.c;
        let mut data = vec![0f32; out.len()];
        for_each_chunk(&mut data, out.w * oc, |row, chunk| {
            let (n, oy) = (row / out.h, row % out.h);
            for (ox, px) in chunk.chunks_exact_mut(oc).enumerate() {
                let win = g.window(input.h, input.w, oy, ox);
                for (o, v) in px.iter_mut().enumerate() {
                    *v = self.affine(acc(n, &win, o), o);
                }
            }
        });
        FloatTensor::new(out, data)
    }
}

pub fn output_conv<W: Word>(input: &BitTensor<W>, layer: &OutputConvLayer<W>) -> Result<FloatTensor> {
    let pop = PopcountBackend::detect();
    layer.emit(input.shape(), |n, win, o| xor_window(pop, input, n, win, &layer.weights, o))
}

/// Output layer applied directly to an 8-bit image.
pub fn output_conv_bytes<W: Word>(img: &ByteTensor, layer: &OutputConvLayer<W>) -> Result<FloatTensor> {
    let planes = img.split_bitplanes::<W>();
    let pop = PopcountBackend::detect();
    layer.emit(img.shape(), |n, win, o| plane_window(pop, &planes, n, win, &layer.weights, o))
}

/// Fully connected output layer over the NHWC-flattened input.
pub fn output_dense<W: Word>(input: &BitTensor<W>, layer: &OutputConvLayer<W>) -> Result<FloatTensor> {
    let g = layer.geometry();
    let flat = input.shape().flattened();
    if g.kernel_h != 1 || g.kernel_w != 1 || flat.c != g.in_channels {
        return dim_err(format!("flattened input has {} features, layer expects 1x1x{}", flat.c, g.in_channels));
    }
    output_conv(&input.flatten(), layer)
}
