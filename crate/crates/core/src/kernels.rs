//! Raw numeric kernels behind the autodiff graph: im2col convolutions,
//! transposed convolutions, bilinear resampling and pooling.
//!
//! All kernels run single-threaded in a fixed accumulation order so that
//! results are bitwise reproducible.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::Tensor;

/// `c = a·b + beta·c` where `a` is `m×k` (or `k×m` when `trans_a`) and `b`
/// is `k×n` (or `n×k` when `trans_b`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if trans_a {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if trans_b {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Spatial geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `h×w` input, or `None` if
    /// the kernel does not fit.
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let h_out = conv_out_len(h, kernel, stride, pad)?;
        let w_out = conv_out_len(w, kernel, stride, pad)?;
        Some(ConvGeom {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(len: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((len.checked_sub(1)?) * stride + kernel + out_pad).checked_sub(2 * pad)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, hw_out) = (g.kernel, g.col_cols());
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `x`.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (k, hw_out) = (g.kernel, g.col_cols());
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

/// Per-channel sum of an NCHW gradient, i.e. the bias gradient.
pub fn channel_sums(dy: &Tensor) -> Tensor {
    let (n, c, h, w) = dy.dims4();
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += dy.plane(s, ch).iter().sum::<f64>();
        }
    }
    let _ = (h, w);
    Tensor::new(vec![c], out)
}

/// Zero-padded convolution. `weight` is `[c_out, c_in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    let (c_out, wc_in, k, _) = weight.dims4();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch");
    let g = ConvGeom::new(c_in, h, w, k, stride, pad).expect("kernel larger than padded input");
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut out = Tensor::zeros(&[n, c_out, g.h_out, g.w_out]);
    let per_out = c_out * cols_n;
    for s in 0..n {
        im2col(x.sample(s), &g, &mut cols);
        let dst = &mut out.data_mut()[s * per_out..(s + 1) * per_out];
        gemm(c_out, rows, cols_n, weight.data(), false, &cols, false, 0.0, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), cols_n);
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c_in, h, w) = x.dims4();
    let (c_out, _, k, _) = weight.dims4();
    let g = ConvGeom::new(c_in, h, w, k, stride, pad).unwrap();
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let per_in = c_in * h * w;
    for s in 0..n {
        let dy_s = dy.sample(s);
        if let Some(dw) = dw.as_mut() {
            im2col(x.sample(s), &g, &mut cols);
            gemm(c_out, cols_n, rows, dy_s, false, &cols, true, 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, c_out, cols_n, weight.data(), true, dy_s, false, 0.0, &mut cols);
            col2im(&cols, &g, &mut dx.data_mut()[s * per_in..(s + 1) * per_in]);
        }
    }
    (dx, dw)
}

/// Transposed convolution. `weight` is `[c_in, c_out, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let (n, c_in, h, w) = x.dims4();
    let (wc_in, c_out, k, _) = weight.dims4();
    assert_eq!(c_in, wc_in, "conv_transpose2d channel mismatch");
    let h_out = conv_transpose_out_len(h, k, stride, pad, out_pad).expect("invalid transposed geometry");
    let w_out = conv_transpose_out_len(w, k, stride, pad, out_pad).expect("invalid transposed geometry");
    let g = ConvGeom::new(c_out, h_out, w_out, k, stride, pad).unwrap();
    assert_eq!((g.h_out, g.w_out), (h, w), "transposed geometry does not invert");
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut out = Tensor::zeros(&[n, c_out, h_out, w_out]);
    let per_out = c_out * h_out * w_out;
    for s in 0..n {
        gemm(rows, c_in, cols_n, weight.data(), true, x.sample(s), false, 0.0, &mut cols);
        let dst = &mut out.data_mut()[s * per_out..(s + 1) * per_out];
        col2im(&cols, &g, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), h_out * w_out);
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c_in, h, w) = x.dims4();
    let (_, c_out, k, _) = weight.dims4();
    let (_, _, h_out, w_out) = dy.dims4();
    let g = ConvGeom::new(c_out, h_out, w_out, k, stride, pad).unwrap();
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let per_in = c_in * h * w;
    for s in 0..n {
        im2col(dy.sample(s), &g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm(
                c_in,
                rows,
                cols_n,
                weight.data(),
                false,
                &cols,
                false,
                0.0,
                &mut dx.data_mut()[s * per_in..(s + 1) * per_in],
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(c_in, cols_n, rows, x.sample(s), false, &cols, true, 1.0, dw.data_mut());
        }
    }
    (dx, dw)
}

/// Two-tap linear interpolation weights along one axis using half-pixel
/// centres: output `o` samples input coordinate `(o + 0.5)·in/out − 0.5`.
#[derive(Clone, Debug)]
pub struct LinearAxis {
    pub taps: Vec<(usize, usize, f64)>,
}

impl LinearAxis {
    pub fn new(len_in: usize, len_out: usize) -> Self {
        let scale = len_in as f64 / len_out as f64;
        let taps = (0..len_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len_in - 1);
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        LinearAxis { taps }
    }
}

/// Separable bilinear resampling of every plane in an NCHW tensor.
pub fn resample_bilinear(x: &Tensor, h_out: usize, w_out: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ay = LinearAxis::new(h, h_out);
    let ax = LinearAxis::new(w, w_out);
    let mut out = Tensor::zeros(&[n, c, h_out, w_out]);
    let mut tmp = vec![0.0; h * w_out];
    let per_out = h_out * w_out;
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, l)) in ax.taps.iter().enumerate() {
                tmp[y * w_out + ox] = src[y * w + i0] * (1.0 - l) + src[y * w + i1] * l;
            }
        }
        let dst = &mut out.data_mut()[p * per_out..(p + 1) * per_out];
        for (oy, &(i0, i1, l)) in ay.taps.iter().enumerate() {
            for ox in 0..w_out {
                dst[oy * w_out + ox] = tmp[i0 * w_out + ox] * (1.0 - l) + tmp[i1 * w_out + ox] * l;
            }
        }
    }
    out
}

/// Adjoint of [`resample_bilinear`].
pub fn resample_bilinear_backward(dy: &Tensor, h_in: usize, w_in: usize) -> Tensor {
    let (n, c, h_out, w_out) = dy.dims4();
    let ay = LinearAxis::new(h_in, h_out);
    let ax = LinearAxis::new(w_in, w_out);
    let mut dx = Tensor::zeros(&[n, c, h_in, w_in]);
    let mut tmp = vec![0.0; h_in * w_out];
    for p in 0..n * c {
        tmp.fill(0.0);
        let src = &dy.data()[p * h_out * w_out..(p + 1) * h_out * w_out];
        for (oy, &(i0, i1, l)) in ay.taps.iter().enumerate() {
            for ox in 0..w_out {
                let g = src[oy * w_out + ox];
                tmp[i0 * w_out + ox] += g * (1.0 - l);
                tmp[i1 * w_out + ox] += g * l;
            }
        }
        let dst = &mut dx.data_mut()[p * h_in * w_in..(p + 1) * h_in * w_in];
        for y in 0..h_in {
            for (ox, &(i0, i1, l)) in ax.taps.iter().enumerate() {
                let g = tmp[y * w_out + ox];
                dst[y * w_in + i0] += g * (1.0 - l);
                dst[y * w_in + i1] += g * l;
            }
        }
    }
    dx
}

/// Non-overlapping 2×2 average pooling (odd trailing rows/columns dropped).
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let (a, b) = (2 * y * w + 2 * xx, (2 * y + 1) * w + 2 * xx);
                dst[y * wo + xx] = 0.25 * (src[a] + src[a + 1] + src[b] + src[b + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ho, wo) = dy.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * src[y * wo + xx];
                let (a, b) = (2 * y * w + 2 * xx, (2 * y + 1) * w + 2 * xx);
                dst[a] += g;
                dst[a + 1] += g;
                dst[b] += g;
                dst[b + 1] += g;
            }
        }
    }
    dx
}
