//! 2-D convolution, its adjoints, and transposed convolution.
//!
//! Forward convolution lowers each batch item to an im2col matrix and runs a
//! single GEMM; the two gradient kernels are GEMMs against the same matrix.
//! Transposed convolution is implemented literally as the adjoint of the
//! strided convolution, so the three routines below are the only places that
//! touch convolution arithmetic:
//!
//! - `deconv2d(x, w)       = conv2d_grad_input(x, w)`   (up to bias)
//! - `d deconv / d x       = conv2d(gy, w)`             (no bias)
//! - `d deconv / d w       = conv2d_grad_weight(gy, x)` (arguments swapped)
//!
//! Weight layout is `(c_out, c_in, kh, kw)` for convolution and
//! `(c_in, c_out, kh, kw)` for transposed convolution.

use crate::tensor::{Scalar, Tensor};

/// Output spatial size of a strided convolution.
pub fn conv_out_dim(in_dim: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (in_dim + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_dim(in_dim: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (in_dim - 1) * stride + kernel + out_pad - 2 * pad
}

/// Lower one batch item into a `(c_in*kh*kw, h_out*w_out)` column matrix.
fn im2col<S: Scalar>(
    x: &Tensor<S>,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [S],
) {
    let [_, c_in, h, w] = x.shape();
    let cols = h_out * w_out;
    let xd = x.data();
    let base = b * c_in * h * w;
    let mut row = 0;
    for c in 0..c_in {
        let chan = base + c * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let out_row = &mut col[row * cols..(row + 1) * cols];
                row += 1;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut out_row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src_row = chan + iy as usize * w;
                    // x index: ox*stride + kx - pad for ox in 0..w_out
                    let off = kx as isize - pad as isize;
                    if stride == 1 {
                        // contiguous copy with edge handling
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *d = if ix < 0 || ix >= w as isize {
                                S::zero()
                            } else {
                                xd[src_row + ix as usize]
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + off;
                            *d = if ix < 0 || ix >= w as isize {
                                S::zero()
                            } else {
                                xd[src_row + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto the input grid (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    col: &[S],
    out: &mut Tensor<S>,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) {
    let [_, c_in, h, w] = out.shape();
    let cols = h_out * w_out;
    let base = b * c_in * h * w;
    let od = out.data_mut();
    let mut row = 0;
    for c in 0..c_in {
        let chan = base + c * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let src_row = &col[row * cols..(row + 1) * cols];
                row += 1;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = chan + iy as usize * w;
                    let off = kx as isize - pad as isize;
                    for (ox, &v) in src_row[oy * w_out..(oy + 1) * w_out].iter().enumerate() {
                        let ix = (ox * stride) as isize + off;
                        if ix >= 0 && ix < w as isize {
                            od[dst_row + ix as usize] = od[dst_row + ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (the usual deep-learning "convolution") with zero
/// padding. `w` is `(c_out, c_in, kh, kw)`, `bias` one entry per out channel.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let [bn, c_in, h, win] = x.shape();
    let [c_out, wc_in, kh, kw] = w.shape();
    assert_eq!(c_in, wc_in, "conv2d channel mismatch: x has {c_in}, w expects {wc_in}");
    let h_out = conv_out_dim(h, kh, stride, pad);
    let w_out = conv_out_dim(win, kw, stride, pad);
    let k = c_in * kh * kw;
    let cols = h_out * w_out;

    let mut out = Tensor::zeros([bn, c_out, h_out, w_out]);
    let mut col = vec![S::zero(); k * cols];
    for b in 0..bn {
        im2col(x, b, kh, kw, stride, pad, h_out, w_out, &mut col);
        let out_off = b * c_out * cols;
        unsafe {
            S::gemm(
                c_out,
                k,
                cols,
                S::one(),
                w.data().as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                cols as isize,
                1,
                S::zero(),
                out.data_mut()[out_off..].as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        if let Some(bias) = bias {
            assert_eq!(bias.len(), c_out, "conv2d bias length mismatch");
            let od = out.data_mut();
            for (c, &bv) in bias.data().iter().enumerate() {
                let start = out_off + c * cols;
                for v in &mut od[start..start + cols] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d` w.r.t. its input: `w^T @ gy` scattered back on the
/// input grid. Also the forward map of the transposed convolution.
pub fn conv2d_grad_input<S: Scalar>(
    gy: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Tensor<S> {
    let [bn, c_out, h_out, w_out] = gy.shape();
    let [wc_out, c_in, kh, kw] = w.shape();
    assert_eq!(c_out, wc_out, "conv2d_grad_input channel mismatch");
    debug_assert_eq!(conv_out_dim(in_hw.0, kh, stride, pad), h_out);
    debug_assert_eq!(conv_out_dim(in_hw.1, kw, stride, pad), w_out);
    let k = c_in * kh * kw;
    let cols = h_out * w_out;

    let mut gx = Tensor::zeros([bn, c_in, in_hw.0, in_hw.1]);
    let mut col = vec![S::zero(); k * cols];
    for b in 0..bn {
        let gy_off = b * c_out * cols;
        unsafe {
            // col (k, cols) = w^T (k, c_out) @ gy_b (c_out, cols)
            S::gemm(
                k,
                c_out,
                cols,
                S::one(),
                w.data().as_ptr(),
                1,
                k as isize,
                gy.data()[gy_off..].as_ptr(),
                cols as isize,
                1,
                S::zero(),
                col.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        col2im_add(&col, &mut gx, b, kh, kw, stride, pad, h_out, w_out);
    }
    gx
}

/// Gradient of `conv2d` w.r.t. the weight: `gy @ im2col(x)^T`, accumulated
/// over the batch in index order.
pub fn conv2d_grad_weight<S: Scalar>(
    x: &Tensor<S>,
    gy: &Tensor<S>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor<S> {
    let [bn, c_in, _, _] = x.shape();
    let [gb, c_out, h_out, w_out] = gy.shape();
    assert_eq!(bn, gb, "conv2d_grad_weight batch mismatch");
    let k = c_in * kh * kw;
    let cols = h_out * w_out;

    let mut gw = Tensor::zeros([c_out, c_in, kh, kw]);
    let mut col = vec![S::zero(); k * cols];
    for b in 0..bn {
        im2col(x, b, kh, kw, stride, pad, h_out, w_out, &mut col);
        let gy_off = b * c_out * cols;
        unsafe {
            // gw (c_out, k) += gy_b (c_out, cols) @ col^T (cols, k)
            S::gemm(
                c_out,
                cols,
                k,
                S::one(),
                gy.data()[gy_off..].as_ptr(),
                cols as isize,
                1,
                col.as_ptr(),
                1,
                cols as isize,
                S::one(),
                gw.data_mut().as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
    gw
}

/// Gradient of `conv2d` w.r.t. the bias: sum over batch and space.
pub fn conv2d_grad_bias<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let [bn, c_out, h_out, w_out] = gy.shape();
    let cols = h_out * w_out;
    let mut gb = Tensor::zeros([c_out, 1, 1, 1]);
    for b in 0..bn {
        for c in 0..c_out {
            let start = (b * c_out + c) * cols;
            let mut acc = S::zero();
            for &v in &gy.data()[start..start + cols] {
                acc = acc + v;
            }
            gb.data_mut()[c] = gb.data_mut()[c] + acc;
        }
    }
    gb
}

/// Transposed convolution. `w` is `(c_in, c_out, kh, kw)`; with kernel 3,
/// stride 2, pad 1, out_pad 1 the output doubles the input spatially.
pub fn deconv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<S> {
    let [_, c_in, h, win] = x.shape();
    let [wc_in, c_out, kh, kw] = w.shape();
    assert_eq!(c_in, wc_in, "deconv2d channel mismatch");
    let h_out = deconv_out_dim(h, kh, stride, pad, out_pad);
    let w_out = deconv_out_dim(win, kw, stride, pad, out_pad);
    let mut y = conv2d_grad_input(x, w, stride, pad, (h_out, w_out));
    if let Some(bias) = bias {
        assert_eq!(bias.len(), c_out, "deconv2d bias length mismatch");
        let [bn, _, _, _] = y.shape();
        let plane = h_out * w_out;
        let yd = y.data_mut();
        for b in 0..bn {
            for (c, &bv) in bias.data().iter().enumerate() {
                let start = (b * c_out + c) * plane;
                for v in &mut yd[start..start + plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}
