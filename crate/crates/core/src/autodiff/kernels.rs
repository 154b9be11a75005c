//! Convolution lowering helpers (im2col / col2im) and layout permutes.

use crate::tensor::Real;

/// Geometry of a square-kernel 2-D convolution over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.height + 2 * self.pad >= self.kernel && self.width + 2 * self.pad >= self.kernel
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Calls `f(patch_offset, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let plen = self.patch_len();
        for n in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (n * ho + oy) * wo + ox;
                    for c in 0..self.channels {
                        let base = (n * self.channels + c) * self.height;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let in_row = (base + iy as usize) * self.width;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let col = (c * k + ky) * k + kx;
                                f(row * plen + col, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfold an NCHW input into a `[batch*out_h*out_w, channels*k*k]` patch matrix.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.out_positions() * g.patch_len()];
    g.for_each_tap(|dst, src| cols[dst] = input[src]);
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch entries back into an NCHW buffer.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    g.for_each_tap(|src, dst| out[dst] = out[dst] + cols[src]);
    out
}

/// `[n, c, hw]` -> `[n*hw, c]`
pub fn nchw_to_rows<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(b * hw + p) * c + ch] = v;
            }
        }
    }
    out
}

/// `[n*hw, c]` -> `[n, c, hw]`
pub fn rows_to_nchw<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..hw {
            let src = &x[(b * hw + p) * c..(b * hw + p + 1) * c];
            for (ch, &v) in src.iter().enumerate() {
                out[(b * c + ch) * hw + p] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_geometry() {
        let g = ConvGeometry {
            batch: 1,
            channels: 1,
            height: 16,
            width: 16,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (8, 8));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 2,
            channels: 3,
            height: 6,
            width: 4,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.batch * g.channels * g.height * g.width)
            .map(|i| ((i * 37 % 11) as f64) - 5.0)
            .collect();
        let y: Vec<f64> = (0..g.out_positions() * g.patch_len())
            .map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0)
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn permutes_invert() {
        let x: Vec<f32> = (0..2 * 3 * 5).map(|v| v as f32).collect();
        let rows = nchw_to_rows(&x, 2, 3, 5);
        assert_eq!(rows_to_nchw(&rows, 2, 3, 5), x);
    }
}
