//! Forward primitives vs direct-summation oracles on small inputs.
//!
//! Double precision must agree to 1e-12, single precision to 1e-6
//! (max-norm relative error).

mod common;

use common::{brute_conv2d, brute_deconv2d, gru_ref, rand_tensor, rel_err, rng, unit_ref};
use deblur_core::conv::{conv2d, deconv2d};
use deblur_core::net::{ModelParams, RecurrentState, Widths};
use deblur_core::tensor::Tensor;

const CASES: &[(usize, usize, usize, usize, usize, usize)] = &[
    // (batch, c_in, c_out, h, w, stride)
    (1, 1, 1, 4, 4, 1),
    (2, 3, 5, 8, 8, 1),
    (1, 4, 2, 8, 6, 2),
    (2, 2, 7, 6, 8, 2),
    (1, 5, 3, 7, 7, 1),
];

#[test]
fn conv2d_matches_brute_force_f64() {
    let mut r = rng(11);
    for &(b, ci, co, h, w, stride) in CASES {
        let x = rand_tensor::<f64>(&mut r, [b, ci, h, w]);
        let wt = rand_tensor::<f64>(&mut r, [co, ci, 3, 3]);
        let bias = rand_tensor::<f64>(&mut r, [co, 1, 1, 1]);
        let fast = conv2d(&x, &wt, Some(&bias), stride, 1);
        let slow = brute_conv2d(&x, &wt, Some(&bias), stride, 1);
        let e = rel_err(&fast, &slow);
        assert!(e <= 1e-12, "conv f64 case {:?} rel err {e}", (b, ci, co, h, w, stride));
    }
}

#[test]
fn conv2d_matches_brute_force_f32() {
    let mut r = rng(12);
    for &(b, ci, co, h, w, stride) in CASES {
        let x = rand_tensor::<f32>(&mut r, [b, ci, h, w]);
        let wt = rand_tensor::<f32>(&mut r, [co, ci, 3, 3]);
        let bias = rand_tensor::<f32>(&mut r, [co, 1, 1, 1]);
        let fast = conv2d(&x, &wt, Some(&bias), stride, 1);
        let slow = brute_conv2d(&x, &wt, Some(&bias), stride, 1);
        let e = rel_err(&fast, &slow);
        assert!(e <= 1e-6, "conv f32 case {:?} rel err {e}", (b, ci, co, h, w, stride));
    }
}

#[test]
fn deconv2d_matches_brute_force() {
    let mut r = rng(13);
    for &(b, ci, co, h, w, _) in CASES {
        let x = rand_tensor::<f64>(&mut r, [b, ci, h, w]);
        let wt = rand_tensor::<f64>(&mut r, [ci, co, 3, 3]);
        let bias = rand_tensor::<f64>(&mut r, [co, 1, 1, 1]);
        let fast = deconv2d(&x, &wt, Some(&bias), 2, 1, 1);
        let slow = brute_deconv2d(&x, &wt, Some(&bias), 2, 1, 1);
        assert_eq!(fast.shape(), [b, co, 2 * h, 2 * w], "deconv must double H, W");
        let e = rel_err(&fast, &slow);
        assert!(e <= 1e-12, "deconv f64 rel err {e}");

        let xf = x.cast::<f32>();
        let wf = wt.cast::<f32>();
        let bf = bias.cast::<f32>();
        let e32 = rel_err(
            &deconv2d(&xf, &wf, Some(&bf), 2, 1, 1),
            &brute_deconv2d(&xf, &wf, Some(&bf), 2, 1, 1),
        );
        assert!(e32 <= 1e-6, "deconv f32 rel err {e32}");
    }
}

#[test]
fn zero_weight_encoder_gives_zero_latent() {
    let widths = Widths::new(3, 4, 5);
    let mut params = ModelParams::<f64>::init(widths, 0).unwrap();
    for t in params.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let img = rand_tensor::<f64>(&mut rng(4), [1, 3, 8, 8]);
    let state = RecurrentState::zeros(widths, 1, 8, 8);
    let (latent, _) = params.encoder_forward(&img, &state).unwrap();
    assert!(latent.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_matches_reference_transcript() {
    let widths = Widths::new(2, 3, 4);
    let params = ModelParams::<f64>::init(widths, 42).unwrap();
    let mut r = rng(5);
    let img = rand_tensor::<f64>(&mut r, [1, 3, 8, 8]);
    let state = RecurrentState {
        f1: rand_tensor(&mut r, [1, widths.w1, 4, 4]),
        f2: rand_tensor(&mut r, [1, widths.w0, 8, 8]),
        h: rand_tensor(&mut r, [1, widths.w2, 2, 2]),
    };
    let (latent, skips) = params.encoder_forward(&img, &state).unwrap();
    let ref_out = unit_ref(&params, &img, &state);
    // the reference transcript recomputes the encoder internally; compare via
    // the full unit below, here check the latent through the GRU identity:
    // h_ref consumed latent_ref, so matching h implies matching latent.
    let h = params.gru_step(&state.h, &latent).unwrap();
    assert!(rel_err(&h, &ref_out.state.h) <= 1e-12);
    assert_eq!(skips.len(), 2);
}

#[test]
fn gru_matches_reference_and_gate_limits() {
    let widths = Widths::new(2, 3, 4);
    let mut params = ModelParams::<f64>::init(widths, 9).unwrap();
    let mut r = rng(6);
    let h = rand_tensor::<f64>(&mut r, [2, widths.w2, 4, 4]);
    let e = rand_tensor::<f64>(&mut r, [2, widths.w2, 4, 4]);

    let got = params.gru_step(&h, &e).unwrap();
    let want = gru_ref(&params.net, &h, &e);
    assert!(rel_err(&got, &want) <= 1e-12, "gru vs transcript");

    // z forced to 0 by a huge negative bias: h' == h exactly up to fp noise
    let z_bias = params.net.gru_z.bias.shape();
    params.net.gru_z.bias = Tensor::full(z_bias, -1e4);
    let frozen = params.gru_step(&h, &e).unwrap();
    assert!(rel_err(&frozen, &h) <= 1e-12, "z == 0 must keep the state");

    // z forced to 1: h' == tanh(Conv([r.h, e]))
    params.net.gru_z.bias = Tensor::full(z_bias, 1e4);
    let replaced = params.gru_step(&h, &e).unwrap();
    let he = Tensor::concat_channels(&[&h, &e]);
    let r_gate = brute_conv2d(&he, &params.net.gru_r.weight, Some(&params.net.gru_r.bias), 1, 1)
        .sigmoid();
    let rhe = Tensor::concat_channels(&[&r_gate.mul(&h), &e]);
    let cand = brute_conv2d(&rhe, &params.net.gru_h.weight, Some(&params.net.gru_h.bias), 1, 1)
        .tanh_elem();
    assert!(rel_err(&replaced, &cand) <= 1e-12, "z == 1 must take the candidate");
}

#[test]
fn gru_zero_inputs_reduce_to_bias_formula() {
    // h_prev = 0, e = 0: h = z * tanh(bias_h) with z = sigmoid(bias_z).
    let widths = Widths::new(2, 3, 4);
    let mut params = ModelParams::<f64>::init(widths, 15).unwrap();
    let mut r = rng(16);
    params.net.gru_z.bias = rand_tensor(&mut r, params.net.gru_z.bias.shape());
    params.net.gru_h.bias = rand_tensor(&mut r, params.net.gru_h.bias.shape());
    let zero = Tensor::zeros([1, widths.w2, 4, 4]);
    let got = params.gru_step(&zero, &zero).unwrap();
    for c in 0..widths.w2 {
        let z = 1.0 / (1.0 + (-params.net.gru_z.bias.data()[c]).exp());
        let want = z * params.net.gru_h.bias.data()[c].tanh();
        for y in 0..4 {
            for x in 0..4 {
                assert!(
                    (got.at(0, c, y, x) - want).abs() <= 1e-12,
                    "channel {c}: {} vs {}",
                    got.at(0, c, y, x),
                    want
                );
            }
        }
    }
}

#[test]
fn decoder_zero_head_emits_zero_residual() {
    let widths = Widths::new(2, 3, 4);
    let mut params = ModelParams::<f64>::init(widths, 21).unwrap();
    params.zero_output_head();
    let mut r = rng(22);
    let h = rand_tensor::<f64>(&mut r, [1, widths.w2, 2, 2]);
    let skips = vec![
        rand_tensor::<f64>(&mut r, [1, widths.w0, 8, 8]),
        rand_tensor::<f64>(&mut r, [1, widths.w1, 4, 4]),
    ];
    let (residual, f1, f2) = params.decoder_forward(&h, &skips).unwrap();
    assert!(residual.data().iter().all(|&v| v == 0.0));
    assert_eq!(residual.shape(), [1, 3, 8, 8]);
    assert_eq!(f1.shape(), [1, widths.w1, 4, 4]);
    assert_eq!(f2.shape(), [1, widths.w0, 8, 8]);
}

#[test]
fn decoder_rejects_bad_skips() {
    let widths = Widths::new(2, 3, 4);
    let params = ModelParams::<f64>::init(widths, 21).unwrap();
    let h = Tensor::<f64>::zeros([1, widths.w2, 2, 2]);
    assert!(params.decoder_forward(&h, &[]).is_err());
    let bad = vec![
        Tensor::<f64>::zeros([1, widths.w0, 4, 4]),
        Tensor::<f64>::zeros([1, widths.w1, 4, 4]),
    ];
    assert!(params.decoder_forward(&h, &bad).is_err());
}

#[test]
fn unit_forward_matches_full_reference_transcript() {
    let widths = Widths::new(2, 3, 4);
    let params = ModelParams::<f64>::init(widths, 77).unwrap();
    let mut r = rng(78);
    let img = rand_tensor::<f64>(&mut r, [1, 3, 8, 8]);
    // nonzero state exercises both recurrence paths
    let state = RecurrentState {
        f1: rand_tensor(&mut r, [1, widths.w1, 4, 4]),
        f2: rand_tensor(&mut r, [1, widths.w0, 8, 8]),
        h: rand_tensor(&mut r, [1, widths.w2, 2, 2]),
    };
    let (out, next) = params.unit_forward(&img, &state).unwrap();
    let want = unit_ref(&params, &img, &state);
    assert!(rel_err(&out, &want.image_out) <= 1e-12, "image out");
    assert!(rel_err(&next.f1, &want.state.f1) <= 1e-12, "f1");
    assert!(rel_err(&next.f2, &want.state.f2) <= 1e-12, "f2");
    assert!(rel_err(&next.h, &want.state.h) <= 1e-12, "h");

    // f32 instantiation of the same transcript
    let p32 = params.cast::<f32>();
    let img32 = img.cast::<f32>();
    let st32 = RecurrentState {
        f1: state.f1.cast(),
        f2: state.f2.cast(),
        h: state.h.cast(),
    };
    let (out32, _) = p32.unit_forward(&img32, &st32).unwrap();
    let want32 = unit_ref(&p32, &img32, &st32);
    assert!(rel_err(&out32, &want32.image_out) <= 1e-6, "image out f32");
}

#[test]
fn recurrence_paths_are_live() {
    // zero state vs nonzero state must give different outputs
    let widths = Widths::new(2, 3, 4);
    let params = ModelParams::<f64>::init(widths, 100).unwrap();
    let mut r = rng(101);
    let img = rand_tensor::<f64>(&mut r, [1, 3, 8, 8]);
    let zero_state = RecurrentState::zeros(widths, 1, 8, 8);
    let live_state = RecurrentState {
        f1: rand_tensor(&mut r, [1, widths.w1, 4, 4]),
        f2: rand_tensor(&mut r, [1, widths.w0, 8, 8]),
        h: rand_tensor(&mut r, [1, widths.w2, 2, 2]),
    };
    let (a, _) = params.unit_forward(&img, &zero_state).unwrap();
    let (b, _) = params.unit_forward(&img, &live_state).unwrap();
    assert!(rel_err(&a, &b) > 1e-9, "recurrent inputs must influence the output");
}

#[test]
fn progressive_deblur_composes_unit_forward() {
    let widths = Widths::new(2, 3, 4);
    let params = ModelParams::<f64>::init(widths, 3).unwrap();
    let img = rand_tensor::<f64>(&mut rng(4), [1, 3, 8, 8]);

    // N = 1 equals a single unit_forward from zero state
    let trace1 = params.progressive_deblur(&img, 1).unwrap();
    let (single, _) = params
        .unit_forward(&img, &RecurrentState::zeros(widths, 1, 8, 8))
        .unwrap();
    assert_eq!(trace1.final_image(), &single);

    // chaining by hand reproduces the trace
    let n = 4;
    let trace = params.progressive_deblur(&img, n).unwrap();
    let mut image = img.clone();
    let mut state = RecurrentState::zeros(widths, 1, 8, 8);
    for i in 0..n {
        let (next, st) = params.unit_forward(&image, &state).unwrap();
        assert_eq!(&next, &trace.per_iter[i], "iteration {i}");
        image = next;
        state = st;
    }

    // re_deblur(times=1) equals the single-pass final
    let finals = params.re_deblur(&img, 1, n).unwrap();
    assert_eq!(finals.len(), 1);
    assert_eq!(&finals[0], trace.final_image());
}
