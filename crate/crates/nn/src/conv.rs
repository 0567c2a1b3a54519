//! im2col / col2im lowering for 2D convolutions.
//!
//! A [`ConvGeom`] describes a strided convolution over one `[C, H, W]`
//! sample. The transposed convolution is the adjoint of the same geometry,
//! so both directions share these two routines.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        assert!(
            height + 2 * padding >= kernel && width + 2 * padding >= kernel,
            "kernel larger than padded input"
        );
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source coordinate for output position `o` and kernel offset `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kj` lands inside the input row.
#[inline]
fn valid_span(geom: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (geom.stride, geom.padding);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // ox * s + kj - p <= width - 1
    let hi = if geom.width + p > kj {
        ((geom.width + p - kj - 1) / s + 1).min(geom.out_width)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lowers one sample `x: [C, H, W]` into `cols: [C*k*k, OH*OW]`.
pub fn im2col<T: Real>(geom: &ConvGeom, x: &[T], cols: &mut [T]) {
    im2col_range(geom, x, 0, geom.col_cols(), cols);
}

/// Adjoint of [`im2col`]: scatters `cols` back and accumulates into `x`.
pub fn col2im<T: Real>(geom: &ConvGeom, cols: &[T], x: &mut [T]) {
    col2im_range(geom, cols, 0, geom.col_cols(), x);
}

/// Column block size that keeps a `rows x block` lowering buffer near 256 KiB.
pub fn column_block<T>(rows: usize) -> usize {
    (256 * 1024 / (rows.max(1) * std::mem::size_of::<T>())).max(64)
}

/// Output positions `[start, end)` split into per-output-row segments
/// `(oy, ox_begin, ox_end, offset_in_block)`.
fn segments(geom: &ConvGeom, start: usize, end: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
    let ow = geom.out_width;
    let first = start / ow;
    let last = if end == start { first } else { (end - 1) / ow + 1 };
    (first..last).map(move |oy| {
        let a = (oy * ow).max(start);
        let b = ((oy + 1) * ow).min(end);
        (oy, a - oy * ow, b - oy * ow, a - start)
    })
}

/// Lowers output columns `[start, end)` of one sample into
/// `cols: [C*k*k, end - start]`.
pub fn im2col_range<T: Real>(geom: &ConvGeom, x: &[T], start: usize, end: usize, cols: &mut [T]) {
    debug_assert_eq!(x.len(), geom.in_len());
    let width = end - start;
    debug_assert_eq!(cols.len(), geom.col_rows() * width);
    let k = geom.kernel;
    for c in 0..geom.channels {
        let plane = &x[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * width..(row + 1) * width];
                for (oy, ox0, ox1, off) in segments(geom, start, end) {
                    let line = &mut dst[off..off + (ox1 - ox0)];
                    match geom.source(oy, ki, geom.height) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * geom.width..(iy + 1) * geom.width];
                            let (lo, hi) = valid_span(geom, kj);
                            let (a, b) = (lo.clamp(ox0, ox1), hi.clamp(ox0, ox1));
                            line[..a - ox0].iter_mut().for_each(|v| *v = T::zero());
                            line[b - ox0..].iter_mut().for_each(|v| *v = T::zero());
                            if a < b {
                                let first = a * geom.stride + kj - geom.padding;
                                let dst = &mut line[a - ox0..b - ox0];
                                if geom.stride == 1 {
                                    dst.copy_from_slice(&src[first..first + (b - a)]);
                                } else {
                                    for (i, v) in dst.iter_mut().enumerate() {
                                        *v = src[first + i * geom.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_range`] for the same column window.
pub fn col2im_range<T: Real>(geom: &ConvGeom, cols: &[T], start: usize, end: usize, x: &mut [T]) {
    debug_assert_eq!(x.len(), geom.in_len());
    let width = end - start;
    debug_assert_eq!(cols.len(), geom.col_rows() * width);
    let k = geom.kernel;
    for c in 0..geom.channels {
        let plane = &mut x[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * width..(row + 1) * width];
                for (oy, ox0, ox1, off) in segments(geom, start, end) {
                    let Some(iy) = geom.source(oy, ki, geom.height) else {
                        continue;
                    };
                    let dst = &mut plane[iy * geom.width..(iy + 1) * geom.width];
                    let (lo, hi) = valid_span(geom, kj);
                    let (a, b) = (lo.clamp(ox0, ox1), hi.clamp(ox0, ox1));
                    if a < b {
                        let first = a * geom.stride + kj - geom.padding;
                        let line = &src[off + a - ox0..off + b - ox0];
                        for (i, &v) in line.iter().enumerate() {
                            dst[first + i * geom.stride] += v;
                        }
                    }
                }
            }
        }
    }
}
