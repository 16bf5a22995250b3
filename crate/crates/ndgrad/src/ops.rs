//! Raw forward/backward kernels shared by [`Graph`](crate::Graph) and
//! direct (tape-free) callers.

use crate::error::{invalid, mismatch, Result};
use crate::graph::Resample;
use crate::scalar::{gemm, Mat};
use crate::{Scalar, Tensor};

/// Output spatial extent of a convolution along one axis.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(mismatch("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let ho = conv2d_output_size(input[2], kernel[2], stride, pad);
        let wo = conv2d_output_size(input[3], kernel[3], stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Self {
                n: input[0],
                c: input[1],
                h: input[2],
                w: input[3],
                o: kernel[0],
                kh: kernel[2],
                kw: kernel[3],
                ho,
                wo,
                stride,
                pad,
            }),
            _ => Err(mismatch("conv2d", input, kernel)),
        }
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.ho, self.wo]
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of an NCHW input with an OIHW kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    Ok(conv2d_forward(&g, input.data(), kernel.data()))
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.n {
        let img = &x[n * in_len..(n + 1) * in_len];
        let b = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(
            Mat::new(w, g.o, k),
            Mat::new(b, k, p),
            T::zero(),
            &mut out[n * g.o * p..(n + 1) * g.o * p],
        );
    }
    Tensor::new(&g.out_shape(), out).expect("conv output shape")
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.o * k]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); if want_dx && !g.is_pointwise() { k * p } else { 0 }];
    for n in 0..g.n {
        let dy_n = &dy[n * g.o * p..(n + 1) * g.o * p];
        let img = &x[n * in_len..(n + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let b = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm(Mat::new(dy_n, g.o, p), Mat::new(b, k, p).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(Mat::new(w, g.o, k).t(), Mat::new(dy_n, g.o, p), T::zero(), dx_n);
            } else {
                gemm(
                    Mat::new(w, g.o, k).t(),
                    Mat::new(dy_n, g.o, p),
                    T::zero(),
                    &mut dcols,
                );
                col2im(g, &dcols, dx_n);
            }
        }
    }
    (dx, dw)
}

/// Nearest 2× upsampling or 2×2 area-average downsampling of an NCHW tensor.
pub fn resample2x<T: Scalar>(input: &Tensor<T>, direction: Resample) -> Result<Tensor<T>> {
    if input.shape().len() != 4 {
        return Err(invalid(
            "resample2x",
            format!("expected NCHW, got {:?}", input.shape()),
        ));
    }
    let (n, c, h, w) = input.dims4();
    let x = input.data();
    match direction {
        Resample::Up => {
            let (h2, w2) = (2 * h, 2 * w);
            let mut out = vec![T::zero(); n * c * h2 * w2];
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(&[n, c, h2, w2], out)
        }
        Resample::Down => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(invalid(
                    "resample2x",
                    format!("down requires even extents, got {h}x{w}"),
                ));
            }
            let (h2, w2) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut out = vec![T::zero(); n * c * h2 * w2];
            for plane in 0..n * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let i = 2 * y * w + 2 * xx;
                        // pairwise order keeps block-constant inputs exact
                        dst[y * w2 + xx] = ((src[i] + src[i + 1]) + (src[i + w] + src[i + w + 1])) * quarter;
                    }
                }
            }
            Tensor::new(&[n, c, h2, w2], out)
        }
    }
}

/// Adjoint of [`resample2x`]; `in_shape` is the forward input's shape.
pub(crate) fn resample2x_backward<T: Scalar>(
    dy: &Tensor<T>,
    in_shape: &[usize],
    direction: Resample,
) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let g = dy.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    match direction {
        Resample::Up => {
            let w2 = 2 * w;
            for plane in 0..n * c {
                let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let i = 2 * y * w2 + 2 * x;
                        dst[y * w + x] = src[i] + src[i + 1] + src[i + w2] + src[i + w2 + 1];
                    }
                }
            }
        }
        Resample::Down => {
            let (h2, w2) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            for plane in 0..n * c {
                let src = &g[plane * h2 * w2..(plane + 1) * h2 * w2];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = src[(y / 2) * w2 + x / 2] * quarter;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, dx).expect("resample grad shape")
}

/// `x (n×d) · w (d×o)`.
pub(crate) fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(mismatch("linear", xs, ws));
    }
    let mut out = vec![T::zero(); xs[0] * ws[1]];
    gemm(
        Mat::new(x.data(), xs[0], xs[1]),
        Mat::new(w.data(), ws[0], ws[1]),
        T::zero(),
        &mut out,
    );
    Tensor::new(&[xs[0], ws[1]], out)
}

pub(crate) fn matmul_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, d, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); d * o];
    gemm(Mat::new(dy.data(), n, o), Mat::new(w.data(), d, o).t(), T::zero(), &mut dx);
    gemm(Mat::new(x.data(), n, d).t(), Mat::new(dy.data(), n, o), T::zero(), &mut dw);
    (
        Tensor::new(&[n, d], dx).expect("dx"),
        Tensor::new(&[d, o], dw).expect("dw"),
    )
}
