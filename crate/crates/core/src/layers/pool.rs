use crate::error::{Error, Result};
use crate::exec::for_each_chunk;
use crate::tensor::{BitTensor, Shape, Word};

/// Max-pooling window. Output extent is `ceil(input / stride)`; windows
/// hanging past the edge only look at in-bounds cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolGeometry {
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl PoolGeometry {
    pub fn square(window: usize, stride: usize) -> Self {
        PoolGeometry { window_h: window, window_w: window, stride_h: stride, stride_w: stride }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_h == 0 || self.window_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::InvalidParameter("pool window and stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape { n: input.n, h: input.h.div_ceil(self.stride_h), w: input.w.div_ceil(self.stride_w), c: input.c }
    }
}

/// Max over {-1, +1} is OR over the bit encoding.
pub fn binary_maxpool<W: Word>(input: &BitTensor<W>, g: &PoolGeometry) -> Result<BitTensor<W>> {
    g.validate()?;
    let s = input.shape();
    let out = g.output_shape(s);
    let wpp = input.words_per_pixel();
    let mut data = vec![W::ZERO; out.pixels() * wpp];
    for_each_chunk(&mut data, out.w * wpp, |row, chunk| {
        let (n, oy) = (row / out.h, row % out.h);
        let y0 = oy * g.stride_h;
        let y1 = (y0 + g.window_h).min(s.h);
        for (ox, dst) in chunk.chunks_exact_mut(wpp).enumerate() {
            let x0 = ox * g.stride_w;
            let x1 = (x0 + g.window_w).min(s.w);
            for y in y0..y1 {
                for x in x0..x1 {
                    for (d, &v) in dst.iter_mut().zip(input.pixel(n, y, x)) {
                        *d = *d | v;
                    }
                }
            }
        }
    });
    Ok(BitTensor::from_parts_unchecked(out, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let g = PoolGeometry::square(2, 2);
        let s = Shape::new(1, 2, 2, 1).unwrap();
        let zeros = BitTensor::<u8>::pack_channels(s, &[-1i8; 4]).unwrap();
        assert!(!binary_maxpool(&zeros, &g).unwrap().bit(0, 0, 0, 0));
        let one = BitTensor::<u8>::pack_channels(s, &[-1i8, 1, -1, -1]).unwrap();
        let out = binary_maxpool(&one, &g).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 1, 1).unwrap());
        assert!(out.bit(0, 0, 0, 0));
    }

    #[test]
    fn ragged_edges_and_same_size_pooling() {
        let s = Shape::new(1, 3, 3, 2).unwrap();
        let mut src = vec![-1i8; s.len()];
        src[s.index(0, 2, 2, 1)] = 1;
        let t = BitTensor::<u64>::pack_channels(s, &src).unwrap();
        let out = binary_maxpool(&t, &PoolGeometry::square(2, 2)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 2, 2).unwrap());
        assert!(out.bit(0, 1, 1, 1));
        assert!(!out.bit(0, 1, 1, 0));
        let same = binary_maxpool(&t, &PoolGeometry::square(2, 1)).unwrap();
        assert_eq!(same.shape(), s);
        assert!(same.bit(0, 1, 1, 1) && same.bit(0, 2, 2, 1) && !same.bit(0, 0, 0, 1));
    }

    #[test]
    fn rejects_zero_stride() {
        let t = BitTensor::<u64>::zeros(Shape::new(1, 2, 2, 1).unwrap());
        assert!(binary_maxpool(&t, &PoolGeometry::square(2, 0)).is_err());
    }
}
