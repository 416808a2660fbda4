//! Convolution and pooling kernels shared by the tape's forward and backward rules.

use crate::tensor::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose stride-1 input column `ow + kj - padding` is in bounds.
    fn valid_columns(&self, kj: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kj).min(self.out_w);
        let hi = (self.width + self.padding).saturating_sub(kj).min(self.out_w).max(lo);
        (lo, hi)
    }
}

/// Unfolds one image `[cin, h, w]` into columns `[cin*kh*kw, out_h*out_w]`.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_columns(kj);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo + kj - g.padding;
                            out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ow, slot) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *slot = if iw < 0 || iw >= g.width as isize { T::zero() } else { src[iw as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds columns back into an image, accumulating overlapping contributions.
fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_columns(kj);
                        if lo < hi {
                            let start = lo + kj - g.padding;
                            let src_row = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(src_row) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = vec![T::zero(); g.batch * g.out_channels * p];
    let mut cols = vec![T::zero(); k * p];
    let in_stride = g.in_channels * g.height * g.width;
    for n in 0..g.batch {
        im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * g.out_channels * p..(n + 1) * g.out_channels * p];
        for (co, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(T::one(), MatRef::rows(kernel, g.out_channels, k), MatRef::rows(&cols, k, p), T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let (k, p) = (g.patch_len(), g.positions());
    let in_stride = g.in_channels * g.height * g.width;
    let out_stride = g.out_channels * p;
    let mut d_input = want[0].then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = want[1].then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = want[2].then(|| vec![T::zero(); g.out_channels]);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..g.batch {
        let dy = &grad_out[n * out_stride..(n + 1) * out_stride];
        if let Some(db) = d_bias.as_mut() {
            for (co, chunk) in dy.chunks(p).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm(T::one(), MatRef::rows(dy, g.out_channels, p), MatRef::transposed(&cols, k, p), T::one(), dk);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm(
                T::one(),
                MatRef::transposed(kernel, g.out_channels, k),
                MatRef::rows(dy, g.out_channels, p),
                T::zero(),
                &mut cols,
            );
            col2im_add(g, &cols, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    ConvGrads { input: d_input, kernel: d_kernel, bias: d_bias }
}

/// 2x2 non-overlapping max pooling. Returns values and the flat input index of
/// each maximum; ties keep the first element in raster order.
pub(crate) fn maxpool2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut values = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                values.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (values, argmax)
}

pub(crate) fn upsample2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += src[i * ow + j];
            }
        }
    }
    out
}
