//! Strided 2-d convolution geometry and the im2col / col2im kernels shared by
//! the convolution and transposed-convolution layers.
//!
//! Activations are stored batch-major with each sample flattened channel-major
//! (`[c, h, w]`), so a batch is an `Array2` of shape `[batch, c * h * w]`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Geometry of a convolution mapping a `(channels_in, height, width)` image to
/// `(channels_out, out_height, out_width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.channels_in * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.channels_out * self.out_height() * self.out_width()
    }

    /// Width of one im2col row.
    pub fn patch_len(&self) -> usize {
        self.channels_in * self.kernel * self.kernel
    }

    fn valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
    }

    pub(crate) fn check(&self) -> bool {
        self.valid() && self.channels_in > 0 && self.channels_out > 0
    }
}

/// Unfolds `x` (`[batch, c*h*w]`) into patches `[batch * oh * ow, c*k*k]`.
pub fn im2col(x: ArrayView2<f64>, g: &ConvGeometry) -> Array2<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let batch = x.nrows();
    let k = g.kernel;
    let patch = g.patch_len();
    let mut cols = Array2::<f64>::zeros((batch * oh * ow, patch));
    let plane = g.height * g.width;
    {
        let out = cols.as_slice_mut().expect("contiguous");
        for b in 0..batch {
            let row = x.row(b);
            let src = row.as_slice().expect("contiguous rows");
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = (b * oh + oy) * ow + ox;
                    let dst = &mut out[r * patch..(r + 1) * patch];
                    for c in 0..g.channels_in {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            let base = c * plane + iy as usize * g.width;
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.width as isize {
                                    continue;
                                }
                                dst[(c * k + ky) * k + kx] = src[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patches back into images `[batch, c*h*w]`.
pub fn col2im(cols: ArrayView2<f64>, g: &ConvGeometry, batch: usize) -> Array2<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let patch = g.patch_len();
    let plane = g.height * g.width;
    let mut x = Array2::<f64>::zeros((batch, g.in_len()));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("contiguous");
    for b in 0..batch {
        let mut row = x.row_mut(b);
        let dst = row.as_slice_mut().expect("contiguous rows");
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                let p = &src[r * patch..(r + 1) * patch];
                for c in 0..g.channels_in {
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = c * plane + iy as usize * g.width;
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            dst[base + ix as usize] += p[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[batch, c*p]` (channel-major) -> `[batch*p, c]` (position-major).
pub fn to_rows(x: ArrayView2<f64>, channels: usize, positions: usize) -> Array2<f64> {
    let batch = x.nrows();
    let mut out = Array2::<f64>::zeros((batch * positions, channels));
    for b in 0..batch {
        for c in 0..channels {
            for p in 0..positions {
                out[[b * positions + p, c]] = x[[b, c * positions + p]];
            }
        }
    }
    out
}

/// Inverse of [`to_rows`].
pub fn from_rows(rows: ArrayView2<f64>, channels: usize, positions: usize) -> Array2<f64> {
    let batch = rows.nrows() / positions;
    let mut out = Array2::<f64>::zeros((batch, channels * positions));
    for b in 0..batch {
        for p in 0..positions {
            for c in 0..channels {
                out[[b, c * positions + p]] = rows[[b * positions + p, c]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> ConvGeometry {
        ConvGeometry {
            channels_in: 2,
            channels_out: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
            height: 6,
            width: 4,
        }
    }

    #[test]
    fn output_size_halves_with_stride_two() {
        let g = geom();
        assert_eq!((g.out_height(), g.out_width()), (3, 2));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = geom();
        let x = Array2::from_shape_fn((2, g.in_len()), |(i, j)| ((i * 31 + j * 7) % 11) as f64 - 5.0);
        let cols = im2col(x.view(), &g);
        let y = Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 13 + j * 3) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), &g, 2);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn rows_round_trip() {
        let x = Array2::from_shape_fn((2, 12), |(i, j)| (i * 12 + j) as f64);
        let rows = to_rows(x.view(), 3, 4);
        assert_eq!(rows[[5, 2]], x[[1, 2 * 4 + 1]]);
        assert_eq!(from_rows(rows.view(), 3, 4), x);
    }
}
