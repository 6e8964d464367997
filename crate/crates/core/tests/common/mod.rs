//! Brute-force reference implementations used as oracles.
//!
//! Everything here is written as plain nested loops, independent of the
//! im2col/GEMM code paths and of the autodiff graph in the crate. The unit
//! transcript re-states the wiring from scratch so the optimized forward can
//! be checked end to end.

#![allow(dead_code)]

use deblur_core::net::{ConvP, ModelParams, Net, RecurrentState};
use deblur_core::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct cross-correlation: out[b,o,oy,ox] = bias[o] +
/// sum_{i,ky,kx} x[b,i,oy*s+ky-p,ox*s+kx-p] * w[o,i,ky,kx].
pub fn brute_conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Tensor<S> {
    let [bn, c_in, h, win] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (win + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([bn, c_out, h_out, w_out]);
    for b in 0..bn {
        for o in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias.map_or(S::zero(), |bv| bv.data()[o]);
                    for i in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < win as isize {
                                    acc = acc
                                        + x.at(b, i, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    *out.at_mut(b, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Direct transposed convolution by scattering: each input pixel adds
/// x[b,i,iy,ix] * w[i,o,ky,kx] at output (iy*s+ky-p, ix*s+kx-p).
pub fn brute_deconv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<S> {
    let [bn, c_in, h, win] = x.shape();
    let [_, c_out, kh, kw] = w.shape();
    let h_out = (h - 1) * stride + kh + out_pad - 2 * pad;
    let w_out = (win - 1) * stride + kw + out_pad - 2 * pad;
    let mut out = Tensor::zeros([bn, c_out, h_out, w_out]);
    if let Some(bv) = bias {
        for b in 0..bn {
            for o in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        *out.at_mut(b, o, oy, ox) = bv.data()[o];
                    }
                }
            }
        }
    }
    for b in 0..bn {
        for i in 0..c_in {
            for iy in 0..h {
                for ix in 0..win {
                    let xv = x.at(b, i, iy, ix);
                    for o in 0..c_out {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy >= 0 && oy < h_out as isize && ox >= 0 && ox < w_out as isize
                                {
                                    let v = out.at(b, o, oy as usize, ox as usize)
                                        + xv * w.at(i, o, ky, kx);
                                    *out.at_mut(b, o, oy as usize, ox as usize) = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn relu_ref<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::from_fn(x.shape(), |b, c, y, xx| {
        let v = x.at(b, c, y, xx);
        if v > S::zero() {
            v
        } else {
            S::zero()
        }
    })
}

fn res_block_ref<S: Scalar>(p: &deblur_core::net::ResBlockP<Tensor<S>>, x: &Tensor<S>) -> Tensor<S> {
    let a = brute_conv2d(x, &p.conv1.weight, Some(&p.conv1.bias), 1, 1);
    let r = relu_ref(&a);
    let b = brute_conv2d(&r, &p.conv2.weight, Some(&p.conv2.bias), 1, 1);
    x.add(&b)
}

fn conv_ref<S: Scalar>(p: &ConvP<Tensor<S>>, x: &Tensor<S>, stride: usize) -> Tensor<S> {
    brute_conv2d(x, &p.weight, Some(&p.bias), stride, 1)
}

/// Scalar transcript of the GRU equations:
/// z = sig(Conv([h,e])), r = sig(Conv([h,e])), c = tanh(Conv([r.h, e])),
/// h' = (1-z).h + z.c
pub fn gru_ref<S: Scalar>(net: &Net<Tensor<S>>, h: &Tensor<S>, e: &Tensor<S>) -> Tensor<S> {
    let he = Tensor::concat_channels(&[h, e]);
    let z = conv_ref(&net.gru_z, &he, 1).sigmoid();
    let r = conv_ref(&net.gru_r, &he, 1).sigmoid();
    let rh = r.mul(h);
    let rhe = Tensor::concat_channels(&[&rh, e]);
    let cand = conv_ref(&net.gru_h, &rhe, 1).tanh_elem();
    z.one_minus().mul(h).add(&z.mul(&cand))
}

pub struct RefUnitOut<S: Scalar> {
    pub image_out: Tensor<S>,
    pub residual: Tensor<S>,
    pub state: RecurrentState<S>,
}

/// Full unit transcript via the brute kernels: encoder with the recurrent
/// feature maps concatenated before each downsampling, GRU at the
/// bottleneck, decoder with skip concatenations before each upsampling and
/// before the output head, residual added to the input.
pub fn unit_ref<S: Scalar>(
    params: &ModelParams<S>,
    image: &Tensor<S>,
    state: &RecurrentState<S>,
) -> RefUnitOut<S> {
    let net = &params.net;
    // encoder
    let mut x = conv_ref(&net.conv_in, image, 1);
    for blk in &net.enc0 {
        x = res_block_ref(blk, &x);
    }
    let s0 = x.clone();
    let mut x = conv_ref(&net.down1, &Tensor::concat_channels(&[&s0, &state.f2]), 2);
    for blk in &net.enc1 {
        x = res_block_ref(blk, &x);
    }
    let s1 = x.clone();
    let mut x = conv_ref(&net.down2, &Tensor::concat_channels(&[&s1, &state.f1]), 2);
    for blk in &net.enc2 {
        x = res_block_ref(blk, &x);
    }
    let latent = x;
    // latent-code recurrence
    let h = gru_ref(net, &state.h, &latent);
    // decoder
    let mut x = h.clone();
    for blk in &net.dec2 {
        x = res_block_ref(blk, &x);
    }
    let mut x = brute_deconv2d(&x, &net.up1.weight, Some(&net.up1.bias), 2, 1, 1);
    for blk in &net.dec1 {
        x = res_block_ref(blk, &x);
    }
    let f1 = x.clone();
    let mut x = brute_deconv2d(
        &Tensor::concat_channels(&[&f1, &s1]),
        &net.up2.weight,
        Some(&net.up2.bias),
        2,
        1,
        1,
    );
    for blk in &net.dec0 {
        x = res_block_ref(blk, &x);
    }
    let f2 = x.clone();
    let residual = conv_ref(&net.conv_out, &Tensor::concat_channels(&[&f2, &s0]), 1);
    RefUnitOut {
        image_out: image.add(&residual),
        residual,
        state: RecurrentState { f1, f2, h },
    }
}

/// Seeded uniform tensor in [-1, 1).
pub fn rand_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.random::<f64>() * 2.0 - 1.0))
        .collect();
    Tensor::new(shape, data)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Max-norm relative error between two tensors.
pub fn rel_err<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err shape mismatch");
    let mut max_diff = 0.0f64;
    let mut max_mag = 1.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        max_diff = max_diff.max((x.into_f64() - y.into_f64()).abs());
        max_mag = max_mag.max(x.into_f64().abs()).max(y.into_f64().abs());
    }
    max_diff / max_mag
}
