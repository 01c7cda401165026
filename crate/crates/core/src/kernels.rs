//! Word-parallel binary arithmetic.
//!
//! The ±1 dot product of two packed vectors of length `len` is
//! `len - 2 * popcount(a ^ b)`. For first-layer bit planes the product of a
//! raw 0/1 vector with ±1 weights is `2 * popcount(plane & w) - popcount(plane)`.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Word;

/// Words reduced per step of the unrolled loops. With 64-bit lanes this is
/// 256 bits per step.
const UNROLL: usize = 4;

/// Which popcount implementation a kernel runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopcountBackend {
    /// Hardware population count where the CPU has one.
    Native,
    /// Portable nibble lookup table.
    Table,
}

impl PopcountBackend {
    pub fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("popcnt") {
                PopcountBackend::Native
            } else {
                PopcountBackend::Table
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            PopcountBackend::Native
        }
    }
}

const NIBBLE_COUNTS: [u8; 16] = [0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4];

#[inline]
pub fn popcount_table<W: Word>(w: W) -> u32 {
    let mut v = w.to_u64();
    let mut n = 0u32;
    while v != 0 {
        n += NIBBLE_COUNTS[(v & 0xF) as usize] as u32;
        v >>= 4;
    }
    n
}

#[inline(always)]
fn reduce<W: Word>(a: &[W], b: &[W], op: impl Fn(W, W) -> W, count: impl Fn(W) -> u32) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0u32; UNROLL];
    let mut ca = a.chunks_exact(UNROLL);
    let mut cb = b.chunks_exact(UNROLL);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..UNROLL {
            acc[i] += count(op(x[i], y[i]));
        }
    }
    let mut total: u32 = acc.iter().sum();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        total += count(op(x, y));
    }
    total
}

#[cfg(target_arch = "x86_64")]
mod native {
    use super::{reduce, Word};

    #[target_feature(enable = "popcnt")]
    unsafe fn xor_popcnt<W: Word>(a: &[W], b: &[W]) -> u32 {
        reduce(a, b, |x, y| x ^ y, W::count_ones)
    }

    #[target_feature(enable = "popcnt")]
    unsafe fn and_popcnt<W: Word>(a: &[W], b: &[W]) -> u32 {
        reduce(a, b, |x, y| x & y, W::count_ones)
    }

    #[target_feature(enable = "popcnt")]
    unsafe fn count_popcnt<W: Word>(a: &[W]) -> u32 {
        a.iter().map(|w| w.count_ones()).sum()
    }

    // `is_x86_feature_detected!` caches its answer, so the check is a single load.
    #[inline]
    pub(super) fn xor_count<W: Word>(a: &[W], b: &[W]) -> u32 {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt.
            unsafe { xor_popcnt(a, b) }
        } else {
            reduce(a, b, |x, y| x ^ y, W::count_ones)
        }
    }

    #[inline]
    pub(super) fn and_count<W: Word>(a: &[W], b: &[W]) -> u32 {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt.
            unsafe { and_popcnt(a, b) }
        } else {
            reduce(a, b, |x, y| x & y, W::count_ones)
        }
    }

    #[inline]
    pub(super) fn count<W: Word>(a: &[W]) -> u32 {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt.
            unsafe { count_popcnt(a) }
        } else {
            a.iter().map(|w| w.count_ones()).sum()
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod native {
    use super::{reduce, Word};

    #[inline]
    pub(super) fn xor_count<W: Word>(a: &[W], b: &[W]) -> u32 {
        reduce(a, b, |x, y| x ^ y, W::count_ones)
    }

    #[inline]
    pub(super) fn and_count<W: Word>(a: &[W], b: &[W]) -> u32 {
        reduce(a, b, |x, y| x & y, W::count_ones)
    }

    #[inline]
    pub(super) fn count<W: Word>(a: &[W]) -> u32 {
        a.iter().map(|w| w.count_ones()).sum()
    }
}

impl PopcountBackend {
    /// `popcount(a ^ b)` over equal-length spans.
    #[inline]
    pub fn xor_count<W: Word>(self, a: &[W], b: &[W]) -> u32 {
        match self {
            PopcountBackend::Native => native::xor_count(a, b),
            PopcountBackend::Table => reduce(a, b, |x, y| x ^ y, popcount_table),
        }
    }

    /// `popcount(a & b)` over equal-length spans.
    #[inline]
    pub fn and_count<W: Word>(self, a: &[W], b: &[W]) -> u32 {
        match self {
            PopcountBackend::Native => native::and_count(a, b),
            PopcountBackend::Table => reduce(a, b, |x, y| x & y, popcount_table),
        }
    }

    #[inline]
    pub fn count<W: Word>(self, a: &[W]) -> u32 {
        match self {
            PopcountBackend::Native => native::count(a),
            PopcountBackend::Table => a.iter().map(|&w| popcount_table(w)).sum(),
        }
    }
}

/// A packed bit vector of `len` valid bits; bits at or past `len` are zero.
#[derive(Debug, Clone, Copy)]
pub struct PackedVectorView<'a, W: Word> {
    words: &'a [W],
    len: usize,
}

impl<'a, W: Word> PackedVectorView<'a, W> {
    pub fn new(words: &'a [W], len: usize) -> Result<Self> {
        if len > words.len() * W::BITS {
            return dim_err(format!("{len} bits do not fit in {} words of {} bits", words.len(), W::BITS));
        }
        let full = len / W::BITS;
        let tail = len % W::BITS;
        let mut trailing = words[full..].iter();
        if tail != 0 {
            let first = *trailing.next().expect("tail word exists");
            if first & !W::low_mask(tail) != W::ZERO {
                return Err(Error::InvalidParameter(format!("bits past length {len} are set")));
            }
        }
        if trailing.any(|&w| w != W::ZERO) {
            return Err(Error::InvalidParameter(format!("bits past length {len} are set")));
        }
        Ok(PackedVectorView { words, len })
    }

    pub fn words(&self) -> &'a [W] {
        self.words
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn check_pair<W: Word>(a: &PackedVectorView<W>, b: &PackedVectorView<W>) -> Result<()> {
    if a.len != b.len || a.words.len() != b.words.len() {
        return dim_err(format!(
            "vector lengths differ: {} bits/{} words vs {} bits/{} words",
            a.len,
            a.words.len(),
            b.len,
            b.words.len()
        ));
    }
    Ok(())
}

/// ±1 dot product of two sign-encoded vectors.
pub fn binary_dot<W: Word>(a: PackedVectorView<W>, b: PackedVectorView<W>) -> Result<i32> {
    binary_dot_with(PopcountBackend::detect(), a, b)
}

pub fn binary_dot_with<W: Word>(
    backend: PopcountBackend,
    a: PackedVectorView<W>,
    b: PackedVectorView<W>,
) -> Result<i32> {
    check_pair(&a, &b)?;
    Ok(a.len as i32 - 2 * backend.xor_count(a.words, b.words) as i32)
}

/// Sum of the ±1 weights at positions where the 0/1 plane is set.
pub fn plane_dot<W: Word>(plane: PackedVectorView<W>, weights: PackedVectorView<W>) -> Result<i32> {
    plane_dot_with(PopcountBackend::detect(), plane, weights)
}

pub fn plane_dot_with<W: Word>(
    backend: PopcountBackend,
    plane: PackedVectorView<W>,
    weights: PackedVectorView<W>,
) -> Result<i32> {
    check_pair(&plane, &weights)?;
    Ok(2 * backend.and_count(plane.words, weights.words) as i32 - backend.count(plane.words) as i32)
}

pub fn span_popcount<W: Word>(words: &[W]) -> u32 {
    PopcountBackend::detect().count(words)
}
