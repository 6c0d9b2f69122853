//! im2col / col2im kernels shared by convolution and transposed convolution.

use crate::scalar::Scalar;

/// Options for [`Graph::conv2d`](crate::Graph::conv2d) and
/// [`Graph::conv_transpose2d`](crate::Graph::conv_transpose2d).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    /// Ignored by `conv2d`.
    pub output_padding: usize,
}

impl ConvOptions {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

/// Spatial output size of a strided, zero-padded convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let full = (input.checked_sub(1)?) * stride + kernel + output_padding;
    full.checked_sub(2 * padding).filter(|&v| v > 0)
}

/// Geometry of a dense convolution from an image `(channels, height, width)`
/// to a column matrix of `(channels * kh * kw) x (out_h * out_w)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ColGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ColGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input coordinate touched by output index `o` at kernel offset `k`.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ColGeometry, col: &mut [T]) {
    let cols = g.cols();
    debug_assert_eq!(col.len(), g.rows() * cols);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ki, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ColGeometry, image: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.width) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_output_size(32, 5, 2, 2), Some(16));
        assert_eq!(conv_output_size(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_output_size(16, 5, 2, 2, 1), Some(32));
        assert_eq!(conv_transpose_output_size(8, 3, 1, 1, 0), Some(8));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ColGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            padding: 1,
            out_h: conv_output_size(5, 3, 2, 1).unwrap(),
            out_w: conv_output_size(4, 2, 2, 1).unwrap(),
        };
        let x: Vec<f64> = (0..g.image_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
