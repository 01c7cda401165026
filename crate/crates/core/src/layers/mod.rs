//! Layer kernels over packed tensors.
//!
//! Binary convolutions read NHWC bit tensors and write NHWC bit tensors. The
//! conv + bias + batch-norm + sign stack is evaluated as one comparison of the
//! integer accumulator against a per-channel threshold, see [`binarize`].

mod conv;
mod output;
mod pool;

pub use conv::{
    binary_dense, first_layer_conv, fused_binary_conv, fused_binary_conv_planned, schedule_conv, ExecutionPlan,
    FirstConvLayer, FusedConvLayer, DEFAULT_PACK_THRESHOLD,
};
pub use output::{output_conv, output_conv_bytes, output_dense, OutputConvLayer};
pub use pool::{binary_maxpool, PoolGeometry};

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::kernels::PopcountBackend;
use crate::tensor::{BitTensor, Shape, Word};

/// Largest receptive field accepted. Keeps the first layer's
/// `255 * fan_in` accumulator inside `i32`.
pub const MAX_FAN_IN: usize = (i32::MAX / 255) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, pad: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvGeometry {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            in_channels,
            out_channels,
        }
    }

    /// A fully connected layer expressed as a 1x1 convolution over a
    /// flattened input.
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self::square(1, 1, 0, in_features, out_features)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidParameter("kernel size must be at least 1".into()));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::InvalidParameter("stride must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParameter("channel counts must be at least 1".into()));
        }
        if self.fan_in() > MAX_FAN_IN {
            return Err(Error::InvalidParameter(format!(
                "receptive field of {} exceeds the accumulator limit {MAX_FAN_IN}",
                self.fan_in()
            )));
        }
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_h.saturating_mul(self.kernel_w).saturating_mul(self.in_channels)
    }

    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let dim = |input: usize, pad: usize, k: usize, s: usize| {
            let span = input + 2 * pad;
            (span >= k).then(|| (span - k) / s + 1)
        };
        match (
            dim(in_h, self.pad_h, self.kernel_h, self.stride_h),
            dim(in_w, self.pad_w, self.kernel_w, self.stride_w),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => dim_err(format!(
                "{}x{} kernel does not fit a {in_h}x{in_w} input with padding {}x{}",
                self.kernel_h, self.kernel_w, self.pad_h, self.pad_w
            )),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return dim_err(format!("input has {} channels, layer expects {}", input.c, self.in_channels));
        }
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape { n: input.n, h, w, c: self.out_channels })
    }

    /// Shape of the packed filter bank: `(out, kernel_h, kernel_w, in)`.
    pub fn weight_shape(&self) -> Shape {
        Shape { n: self.out_channels, h: self.kernel_h, w: self.kernel_w, c: self.in_channels }
    }

    fn window(&self, in_h: usize, in_w: usize, oy: usize, ox: usize) -> Window {
        let iy0 = (oy * self.stride_h) as isize - self.pad_h as isize;
        let ix0 = (ox * self.stride_w) as isize - self.pad_w as isize;
        let clip = |origin: isize, k: usize, extent: usize| {
            let lo = (-origin).max(0) as usize;
            let hi = (extent as isize - origin).clamp(0, k as isize) as usize;
            lo.min(hi)..hi
        };
        Window {
            iy0,
            ix0,
            ky: clip(iy0, self.kernel_h, in_h),
            kx: clip(ix0, self.kernel_w, in_w),
        }
    }
}

/// Batch-norm statistics for one layer, one entry per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Checks lengths, finiteness and `sigma > 0`. Gamma may be zero here;
    /// threshold folding rejects it separately.
    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, v) in [("gamma", &self.gamma), ("beta", &self.beta), ("mean", &self.mean), ("sigma", &self.sigma)] {
            if v.len() != channels {
                return dim_err(format!("batch-norm {name} has {} entries, expected {channels}", v.len()));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("batch-norm {name}[{i}] is not finite")));
            }
        }
        if let Some(i) = self.sigma.iter().position(|&s| s <= 0.0) {
            return Err(Error::InvalidParameter(format!("batch-norm sigma[{i}] = {} must be positive", self.sigma[i])));
        }
        Ok(())
    }
}

/// Output bit of the integrated conv/bias/BN/sign operator.
///
/// With `A = x1 < xi`, `B = gamma > 0`, `C = x1 == xi` the result is
/// `(A xor B) or C`: 1 for `x1 >= xi` when gamma is positive and for
/// `x1 <= xi` when gamma is negative.
#[inline(always)]
pub fn binarize(x1: i32, xi: f64, gamma_positive: bool) -> bool {
    let x = f64::from(x1);
    let below = x < xi;
    let tie = x == xi;
    (below ^ gamma_positive) | tie
}

/// In-bounds part of a receptive field.
#[derive(Debug, Clone)]
pub(crate) struct Window {
    iy0: isize,
    ix0: isize,
    ky: Range<usize>,
    kx: Range<usize>,
}

impl Window {
    #[inline]
    fn row(&self, ky: usize) -> usize {
        (self.iy0 + ky as isize) as usize
    }

    #[inline]
    fn col0(&self) -> usize {
        (self.ix0 + self.kx.start as isize) as usize
    }
}

/// ±1 dot product of the receptive field with filter `o`. Out-of-bounds
/// cells contribute nothing.
#[inline]
pub(crate) fn xor_window<W: Word>(
    pop: PopcountBackend,
    input: &BitTensor<W>,
    n: usize,
    win: &Window,
    weights: &BitTensor<W>,
    o: usize,
) -> i32 {
    let wpp = input.words_per_pixel();
    let cells = win.kx.len();
    if cells == 0 {
        return 0;
    }
    let span = cells * wpp;
    let valid_bits = (cells * input.shape().c) as i32;
    let (iw, ww) = (input.words(), weights.words());
    let mut acc = 0i32;
    for ky in win.ky.clone() {
        let a = &iw[input.word_index(n, win.row(ky), win.col0(), 0)..][..span];
        let b = &ww[weights.word_index(o, ky, win.kx.start, 0)..][..span];
        acc += valid_bits - 2 * pop.xor_count(a, b) as i32;
    }
    acc
}

/// Integer product of an 8-bit receptive field with ±1 filter `o`, summed
/// over bit planes.
#[inline]
pub(crate) fn plane_window<W: Word>(
    pop: PopcountBackend,
    planes: &[BitTensor<W>; 8],
    n: usize,
    win: &Window,
    weights: &BitTensor<W>,
    o: usize,
) -> i32 {
    let wpp = weights.words_per_pixel();
    let cells = win.kx.len();
    if cells == 0 {
        return 0;
    }
    let span = cells * wpp;
    let ww = weights.words();
    let mut acc = 0i32;
    for ky in win.ky.clone() {
        let b = &ww[weights.word_index(o, ky, win.kx.start, 0)..][..span];
        let start = planes[0].word_index(n, win.row(ky), win.col0(), 0);
        for (bit, plane) in planes.iter().enumerate() {
            let a = &plane.words()[start..start + span];
            let dot = 2 * pop.and_count(a, b) as i32 - pop.count(a) as i32;
            acc += dot << bit;
        }
    }
    acc
}

fn check_weights<W: Word>(g: &ConvGeometry, weights: &BitTensor<W>) -> Result<()> {
    g.validate()?;
    if weights.shape() != g.weight_shape() {
        return dim_err(format!("weights have shape {}, geometry needs {}", weights.shape(), g.weight_shape()));
    }
    Ok(())
}

fn check_channel_vec<T>(name: &str, v: &[T], channels: usize) -> Result<()> {
    if v.len() != channels {
        return dim_err(format!("{name} has {} entries, expected {channels}", v.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The four-case rule written out literally.
    fn four_case(x1: f64, xi: f64, gamma: f64) -> bool {
        if gamma > 0.0 {
            x1 >= xi
        } else {
            x1 <= xi
        }
    }

    #[test]
    fn binarize_examples() {
        assert!(binarize(5, 3.0, true));
        assert!(binarize(3, 3.0, false));
        assert!(binarize(3, 3.0, true));
        assert!(!binarize(2, 3.0, true));
        assert!(binarize(2, 3.0, false));
        assert!(!binarize(4, 3.0, false));
    }

    #[test]
    fn logic_form_agrees_with_four_cases() {
        let mut agree = 0;
        for (x1, xi) in [(2, 3.0), (3, 3.0), (4, 3.0)] {
            for gamma in [1.0, -1.0] {
                assert_eq!(binarize(x1, xi, gamma > 0.0), four_case(x1 as f64, xi, gamma));
                agree += 1;
            }
        }
        assert_eq!(agree, 6);
    }

    #[test]
    fn geometry_output_dims() {
        let g = ConvGeometry::square(3, 1, 1, 8, 8);
        assert_eq!(g.output_hw(32, 32).unwrap(), (32, 32));
        let g = ConvGeometry::square(11, 4, 2, 3, 96);
        assert_eq!(g.output_hw(227, 227).unwrap(), (56, 56));
        assert!(ConvGeometry::square(5, 1, 0, 1, 1).output_hw(4, 4).is_err());
        assert!(ConvGeometry::square(3, 0, 0, 1, 1).validate().is_err());
    }

    #[test]
    fn window_clipping() {
        let g = ConvGeometry::square(3, 2, 1, 1, 1);
        let w = g.window(5, 5, 0, 0);
        assert_eq!((w.ky.clone(), w.kx.clone()), (1..3, 1..3));
        let w = g.window(5, 5, 2, 2);
        assert_eq!((w.ky.clone(), w.kx.clone()), (0..2, 0..2));
        let w = g.window(5, 5, 1, 1);
        assert_eq!((w.ky, w.kx), (0..3, 0..3));
    }

    #[test]
    fn bn_validation() {
        let mut bn = BnParams::identity(2);
        assert!(bn.validate(2).is_ok());
        assert!(bn.validate(3).is_err());
        bn.sigma[1] = 0.0;
        assert!(matches!(bn.validate(2), Err(Error::InvalidParameter(_))));
        bn.sigma[1] = 1.0;
        bn.beta[0] = f32::NAN;
        assert!(bn.validate(2).is_err());
    }
}
