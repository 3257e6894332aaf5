//! im2col-based convolution kernels shared by the conv and transposed-conv ops.
//!
//! Work is split per batch sample; per-sample weight-gradient partials are
//! summed in sample order so results do not depend on the worker count.

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{Result, TensorError};

/// Geometry of a convolution seen from the image side: an image of
/// `channels x height x width` is scanned by a `kh x kw` window producing an
/// `out_h x out_w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
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

impl ConvGeom {
    pub fn conv(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::invalid(op, "stride must be at least 1"));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(TensorError::invalid(
                op,
                format!("kernel {kh}x{kw} larger than padded input {height}x{width} (padding {padding})"),
            ));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the transposed convolution that maps an `in_h x in_w`
    /// grid to the image it would have been convolved from.
    pub fn transposed(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        const OP: &str = "deconv2d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be at least 1"));
        }
        let height = (stride * (in_h.max(1) - 1) + kh) as isize - 2 * padding as isize;
        let width = (stride * (in_w.max(1) - 1) + kw) as isize - 2 * padding as isize;
        if in_h == 0 || in_w == 0 || height <= 0 || width <= 0 {
            return Err(TensorError::invalid(
                OP,
                format!("implied output size {height}x{width} is not positive"),
            ));
        }
        Ok(ConvGeom {
            channels,
            height: height as usize,
            width: width as usize,
            kh,
            kw,
            stride,
            padding,
            out_h: in_h,
            out_w: in_w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Element>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let src_plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let drow = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src_plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *d = if iw >= 0 && iw < g.width as isize {
                            srow[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let dst_plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst_plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let srow = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, &s) in srow.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            drow[iw as usize] = drow[iw as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b) {
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Element>(dout: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            let mut acc = 0.0f64;
            for n in 0..batch {
                let base = (n * channels + c) * plane;
                acc += dout[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::from_f64(acc)
        })
        .collect()
}

fn sum_partials<T: Element>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t = *t + v;
        }
    }
    total
}

/// Forward convolution. `g` is the input-side geometry; weight is
/// `[c_out, g.channels, kh, kw]`.
pub fn conv_forward<T: Element>(x: &[T], batch: usize, w: &[T], bias: Option<&[T]>, c_out: usize, g: &ConvGeom) -> Vec<T> {
    let k = g.col_rows();
    let plane = g.col_cols();
    let mut out = vec![T::zero(); batch * c_out * plane];
    out.par_chunks_mut(c_out * plane)
        .zip(x.par_chunks(g.image_len()))
        .for_each(|(o, xi)| {
            let mut scratch = Vec::new();
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                scratch.resize(k * plane, T::zero());
                im2col(xi, g, &mut scratch);
                &scratch
            };
            T::gemm(c_out, k, plane, T::one(), w, k as isize, 1, cols, plane as isize, 1, T::zero(), o, plane as isize, 1);
            add_bias(o, bias, plane);
        });
    out
}

/// Gradients of [`conv_forward`] with respect to input, weight and bias.
pub fn conv_backward<T: Element>(
    x: &[T],
    batch: usize,
    w: &[T],
    c_out: usize,
    g: &ConvGeom,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.col_rows();
    let plane = g.col_cols();
    let mut dx = vec![T::zero(); batch * g.image_len()];
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(g.image_len())
        .enumerate()
        .map(|(n, dxi)| {
            let xi = &x[n * g.image_len()..(n + 1) * g.image_len()];
            let di = &dout[n * c_out * plane..(n + 1) * c_out * plane];
            let mut dw = vec![T::zero(); c_out * k];
            if g.is_pointwise() {
                T::gemm(k, c_out, plane, T::one(), w, 1, k as isize, di, plane as isize, 1, T::zero(), dxi, plane as isize, 1);
                T::gemm(c_out, plane, k, T::one(), di, plane as isize, 1, xi, 1, plane as isize, T::zero(), &mut dw, k as isize, 1);
            } else {
                let mut cols = vec![T::zero(); k * plane];
                T::gemm(k, c_out, plane, T::one(), w, 1, k as isize, di, plane as isize, 1, T::zero(), &mut cols, plane as isize, 1);
                col2im_add(&cols, g, dxi);
                im2col(xi, g, &mut cols);
                T::gemm(c_out, plane, k, T::one(), di, plane as isize, 1, &cols, 1, plane as isize, T::zero(), &mut dw, k as isize, 1);
            }
            dw
        })
        .collect();
    let dw = sum_partials(partials, c_out * k);
    let db = bias_grad(dout, batch, c_out, plane);
    (dx, dw, db)
}

/// Transposed convolution. `g` is the geometry of the *output* image; the
/// input grid is `g.out_h x g.out_w` with `c_in` channels and the weight is
/// `[c_in, g.channels, kh, kw]`.
pub fn deconv_forward<T: Element>(x: &[T], batch: usize, c_in: usize, w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let k = g.col_rows();
    let plane = g.col_cols();
    let mut out = vec![T::zero(); batch * g.image_len()];
    out.par_chunks_mut(g.image_len())
        .zip(x.par_chunks(c_in * plane))
        .for_each(|(o, xi)| {
            let mut cols = vec![T::zero(); k * plane];
            T::gemm(k, c_in, plane, T::one(), w, 1, k as isize, xi, plane as isize, 1, T::zero(), &mut cols, plane as isize, 1);
            col2im_add(&cols, g, o);
            add_bias(o, bias, g.height * g.width);
        });
    out
}

/// Gradients of [`deconv_forward`] with respect to input, weight and bias.
pub fn deconv_backward<T: Element>(
    x: &[T],
    batch: usize,
    c_in: usize,
    w: &[T],
    g: &ConvGeom,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.col_rows();
    let plane = g.col_cols();
    let mut dx = vec![T::zero(); batch * c_in * plane];
    let partials: Vec<Vec<T>> = dx
        .par_chunks_mut(c_in * plane)
        .enumerate()
        .map(|(n, dxi)| {
            let xi = &x[n * c_in * plane..(n + 1) * c_in * plane];
            let di = &dout[n * g.image_len()..(n + 1) * g.image_len()];
            let mut cols = vec![T::zero(); k * plane];
            im2col(di, g, &mut cols);
            T::gemm(c_in, k, plane, T::one(), w, k as isize, 1, &cols, plane as isize, 1, T::zero(), dxi, plane as isize, 1);
            let mut dw = vec![T::zero(); c_in * k];
            T::gemm(c_in, plane, k, T::one(), xi, plane as isize, 1, &cols, 1, plane as isize, T::zero(), &mut dw, k as isize, 1);
            dw
        })
        .collect();
    let dw = sum_partials(partials, c_in * k);
    let db = bias_grad(dout, batch, g.channels, g.height * g.width);
    (dx, dw, db)
}
