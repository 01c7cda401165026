//! NHWC tensors: channel bit-packed binary tensors, raw byte images and
//! real-valued outputs.
//!
//! Binary tensors pack the channel axis into machine words. Channel `k` of a
//! pixel lives in word `k / W::BITS` at bit `k % W::BITS`, least significant
//! bit first. A set bit encodes +1 and a clear bit encodes -1. Bits past the
//! last channel of every pixel are always zero, so xor-based arithmetic over
//! whole words never counts them.

use std::fmt::Debug;
use std::ops::{BitAnd, BitOr, BitXor, Not};

use crate::error::{dim_err, Error, Result};

/// A machine word usable as a packing lane.
pub trait Word:
    Copy
    + Default
    + Eq
    + Debug
    + Send
    + Sync
    + 'static
    + BitAnd<Output = Self>
    + BitOr<Output = Self>
    + BitXor<Output = Self>
    + Not<Output = Self>
{
    const BITS: usize;
    const ZERO: Self;
    const ONES: Self;

    fn count_ones(self) -> u32;
    /// Keeps the low `Self::BITS` bits of `v`.
    fn from_u64(v: u64) -> Self;
    fn to_u64(self) -> u64;

    /// Word with the low `bits` bits set; `bits` may equal `Self::BITS`.
    fn low_mask(bits: usize) -> Self {
        debug_assert!(bits <= Self::BITS);
        if bits >= 64 {
            Self::ONES
        } else {
            Self::from_u64((1u64 << bits) - 1)
        }
    }

    #[inline]
    fn bit(self, k: usize) -> bool {
        (self.to_u64() >> k) & 1 == 1
    }

    #[inline]
    fn with_bit(self, k: usize) -> Self {
        self | Self::from_u64(1u64 << k)
    }
}

macro_rules! impl_word {
    ($($t:ty),*) => {$(
        impl Word for $t {
            const BITS: usize = <$t>::BITS as usize;
            const ZERO: Self = 0;
            const ONES: Self = <$t>::MAX;

            #[inline(always)]
            fn count_ones(self) -> u32 {
                <$t>::count_ones(self)
            }

            #[inline(always)]
            fn from_u64(v: u64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn to_u64(self) -> u64 {
                self as u64
            }
        }
    )*};
}

impl_word!(u8, u16, u32, u64);

/// Number of words needed to hold `bits` bits.
pub fn words_for<W: Word>(bits: usize) -> usize {
    bits.div_ceil(W::BITS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let shape = Shape { n, h, w, c };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return dim_err(format!("all dimensions must be positive, got {self}"));
        }
        self.n
            .checked_mul(self.h)
            .and_then(|v| v.checked_mul(self.w))
            .and_then(|v| v.checked_mul(self.c))
            .ok_or_else(|| Error::Dimension(format!("element count of {self} overflows")))?;
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat NHWC index of element `(n, h, w, c)`.
    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.h + h) * self.w + w) * self.c + c
    }

    #[inline]
    pub fn pixel_index(&self, n: usize, h: usize, w: usize) -> usize {
        (n * self.h + h) * self.w + w
    }

    /// Same batch count, everything else folded into channels.
    pub fn flattened(&self) -> Shape {
        Shape { n: self.n, h: 1, w: 1, c: self.h * self.w * self.c }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// Channel-packed binary tensor in NHWC order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor<W: Word = u64> {
    shape: Shape,
    words_per_pixel: usize,
    data: Vec<W>,
}

impl<W: Word> BitTensor<W> {
    pub fn zeros(shape: Shape) -> Self {
        let words_per_pixel = words_for::<W>(shape.c);
        BitTensor { shape, words_per_pixel, data: vec![W::ZERO; shape.pixels() * words_per_pixel] }
    }

    /// Wraps an existing word buffer, checking its length and that every
    /// padding bit is clear.
    pub fn from_words(shape: Shape, data: Vec<W>) -> Result<Self> {
        shape.validate()?;
        let words_per_pixel = words_for::<W>(shape.c);
        if data.len() != shape.pixels() * words_per_pixel {
            return dim_err(format!(
                "{} words supplied for shape {shape}, expected {}",
                data.len(),
                shape.pixels() * words_per_pixel
            ));
        }
        let t = BitTensor { shape, words_per_pixel, data };
        if !t.padding_is_clear() {
            return Err(Error::InvalidParameter(format!(
                "padding bits past channel {} are set",
                shape.c - 1
            )));
        }
        Ok(t)
    }

    /// Packs a ±1 tensor laid out in NHWC order.
    pub fn pack_channels<T: Copy + Into<f64>>(shape: Shape, src: &[T]) -> Result<Self> {
        shape.validate()?;
        if src.len() != shape.len() {
            return dim_err(format!("{} values supplied for shape {shape}", src.len()));
        }
        let mut t = Self::zeros(shape);
        let wpp = t.words_per_pixel;
        for (p, (pixel, words)) in src.chunks_exact(shape.c).zip(t.data.chunks_exact_mut(wpp)).enumerate() {
            for (k, &v) in pixel.iter().enumerate() {
                let v: f64 = v.into();
                if v == 1.0 {
                    words[k / W::BITS] = words[k / W::BITS].with_bit(k % W::BITS);
                } else if v != -1.0 {
                    return Err(Error::InvalidValue { index: p * shape.c + k, value: v });
                }
            }
        }
        Ok(t)
    }

    /// Inverse of [`pack_channels`](Self::pack_channels).
    pub fn unpack_channels(&self) -> Vec<i8> {
        let c = self.shape.c;
        let mut out = Vec::with_capacity(self.shape.len());
        for words in self.data.chunks_exact(self.words_per_pixel) {
            out.extend((0..c).map(|k| if words[k / W::BITS].bit(k % W::BITS) { 1 } else { -1 }));
        }
        out
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn lane_bits(&self) -> usize {
        W::BITS
    }

    pub fn words_per_pixel(&self) -> usize {
        self.words_per_pixel
    }

    pub fn words(&self) -> &[W] {
        &self.data
    }

    pub fn into_words(self) -> Vec<W> {
        self.data
    }

    /// Flat index of word `k` of pixel `(n, h, w)`.
    #[inline]
    pub fn word_index(&self, n: usize, h: usize, w: usize, k: usize) -> usize {
        self.shape.pixel_index(n, h, w) * self.words_per_pixel + k
    }

    #[inline]
    pub fn pixel(&self, n: usize, h: usize, w: usize) -> &[W] {
        let start = self.word_index(n, h, w, 0);
        &self.data[start..start + self.words_per_pixel]
    }

    pub fn bit(&self, n: usize, h: usize, w: usize, c: usize) -> bool {
        self.pixel(n, h, w)[c / W::BITS].bit(c % W::BITS)
    }

    pub fn padding_is_clear(&self) -> bool {
        let tail = self.shape.c % W::BITS;
        if tail == 0 {
            return true;
        }
        let mask = !W::low_mask(tail);
        self.data
            .chunks_exact(self.words_per_pixel)
            .all(|px| px[self.words_per_pixel - 1] & mask == W::ZERO)
    }

    /// Repacks to `(n, 1, 1, h*w*c)` so that a whole image is one bit vector.
    pub fn flatten(&self) -> BitTensor<W> {
        let shape = self.shape.flattened();
        if self.shape.c.is_multiple_of(W::BITS) || (self.shape.h == 1 && self.shape.w == 1) {
            return BitTensor { shape, words_per_pixel: words_for::<W>(shape.c), data: self.data.clone() };
        }
        let mut out = BitTensor::<W>::zeros(shape);
        let per_image = self.shape.h * self.shape.w;
        let c = self.shape.c;
        for n in 0..self.shape.n {
            let dst = &mut out.data[n * out.words_per_pixel..(n + 1) * out.words_per_pixel];
            for p in 0..per_image {
                let src = &self.data[(n * per_image + p) * self.words_per_pixel..][..self.words_per_pixel];
                for k in 0..c {
                    if src[k / W::BITS].bit(k % W::BITS) {
                        let bit = p * c + k;
                        dst[bit / W::BITS] = dst[bit / W::BITS].with_bit(bit % W::BITS);
                    }
                }
            }
        }
        out
    }

    /// Same logical bits stored in a different lane width.
    pub fn to_lanes<V: Word>(&self) -> BitTensor<V> {
        let mut out = BitTensor::<V>::zeros(self.shape);
        let c = self.shape.c;
        for (src, dst) in self.data.chunks_exact(self.words_per_pixel).zip(out.data.chunks_exact_mut(out.words_per_pixel)) {
            for k in 0..c {
                if src[k / W::BITS].bit(k % W::BITS) {
                    dst[k / V::BITS] = dst[k / V::BITS].with_bit(k % V::BITS);
                }
            }
        }
        out
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<W>) -> Self {
        let words_per_pixel = words_for::<W>(shape.c);
        debug_assert_eq!(data.len(), shape.pixels() * words_per_pixel);
        BitTensor { shape, words_per_pixel, data }
    }
}

/// Unsigned 8-bit NHWC tensor, typically an input image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteTensor {
    shape: Shape,
    data: Vec<u8>,
}

impl ByteTensor {
    pub fn new(shape: Shape, data: Vec<u8>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return dim_err(format!("{} bytes supplied for shape {shape}", data.len()));
        }
        Ok(ByteTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        ByteTensor { shape, data: vec![0; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Splits into eight bit planes, least significant first. Plane bits are
    /// raw 0/1 values, not signs.
    pub fn split_bitplanes<W: Word>(&self) -> [BitTensor<W>; 8] {
        let mut planes: [BitTensor<W>; 8] = std::array::from_fn(|_| BitTensor::zeros(self.shape));
        let c = self.shape.c;
        let wpp = words_for::<W>(c);
        for (p, pixel) in self.data.chunks_exact(c).enumerate() {
            for (k, &byte) in pixel.iter().enumerate() {
                let mut bits = byte;
                while bits != 0 {
                    let plane = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let word = &mut planes[plane].data[p * wpp + k / W::BITS];
                    *word = word.with_bit(k % W::BITS);
                }
            }
        }
        planes
    }
}

/// Real-valued NHWC tensor produced by full-precision output layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return dim_err(format!("{} values supplied for shape {shape}", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite value {} at index {i}", data[i])));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}
