//! The shared-weight encoder-decoder deblurring unit and its recurrence.
//!
//! One unit application (`unit_forward`) runs:
//!
//! ```text
//! encoder:  conv_in -> res x2 ----cat F2---- down1 -> res x2 --cat F1-- down2 -> res x2 = e
//!                        |s0                            |s1
//! gru:      h = GRU(h_prev, e)                          |                        (at H/4)
//! decoder:  res x2 -> up1 -> res x2 --cat s1-- up2 -> res x2 --cat s0-- conv_out = residual
//!                              |F1'                     |F2'
//! output:   image_out = image + residual
//! ```
//!
//! Every convolution is 3x3 with padding 1; `down*` use stride 2 and `up*`
//! are transposed convolutions that exactly double the spatial size. The two
//! decoder feature maps taken after each upsampling stage (`F1'` at half
//! resolution, `F2'` at full resolution) and the GRU hidden state are carried
//! into the next iteration; the next encoder concatenates them right before
//! the matching downsampling layer. Residual blocks are
//! conv-ReLU-conv plus an additive skip, so all nonlinearity lives inside
//! the blocks and the output head is linear (residuals are signed).
//!
//! The same wiring is expressed once, generically over a [`Backend`], and
//! instantiated both for plain tensors (inference) and for autodiff graph
//! nodes (training), so the two paths cannot drift apart.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};
use crate::{conv, loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel counts at the three resolution levels (full, half, quarter).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Widths {
    pub w0: usize,
    pub w1: usize,
    pub w2: usize,
}

impl Widths {
    pub fn new(w0: usize, w1: usize, w2: usize) -> Self {
        Widths { w0, w1, w2 }
    }

    fn validate(&self) -> Result<()> {
        if self.w0 == 0 || self.w1 == 0 || self.w2 == 0 {
            return Err(Error::Config(format!(
                "channel widths must be >= 1, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Default widths, calibrated once against the parameter budget: with the
/// layer inventory below, (40, 80, 128) gives 3,038,043 learnable scalars
/// (see `count_params`), about 2.3% under the 3.11M target.
impl Default for Widths {
    fn default() -> Self {
        Widths::new(40, 80, 128)
    }
}

/// One convolution layer: weight plus per-output-channel bias.
#[derive(Clone, Debug)]
pub struct ConvP<V> {
    pub weight: V,
    pub bias: V,
}

/// Residual block parameters: conv-ReLU-conv with additive skip.
#[derive(Clone, Debug)]
pub struct ResBlockP<V> {
    pub conv1: ConvP<V>,
    pub conv2: ConvP<V>,
}

/// All layers of the unit, generic over the value type so the same struct
/// holds tensors (`ModelParams`) or graph node ids (bound parameters).
#[derive(Clone, Debug)]
pub struct Net<V> {
    pub conv_in: ConvP<V>,
    pub enc0: [ResBlockP<V>; 2],
    pub down1: ConvP<V>,
    pub enc1: [ResBlockP<V>; 2],
    pub down2: ConvP<V>,
    pub enc2: [ResBlockP<V>; 2],
    pub gru_z: ConvP<V>,
    pub gru_r: ConvP<V>,
    pub gru_h: ConvP<V>,
    pub dec2: [ResBlockP<V>; 2],
    pub up1: ConvP<V>,
    pub dec1: [ResBlockP<V>; 2],
    pub up2: ConvP<V>,
    pub dec0: [ResBlockP<V>; 2],
    pub conv_out: ConvP<V>,
}

impl<V> ConvP<V> {
    fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> ConvP<U> {
        ConvP {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a V)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut V)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<V> ResBlockP<V> {
    fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> ResBlockP<U> {
        ResBlockP {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
        }
    }
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a V)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut V)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

impl<V> Net<V> {
    /// Apply `f` to every parameter value in the canonical order (the struct
    /// field order). `map`, `visit` and `visit_mut` all use this order; the
    /// optimizer and checkpoint code rely on it being stable.
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> Net<U> {
        let f = &mut f;
        Net {
            conv_in: self.conv_in.map(f),
            enc0: [self.enc0[0].map(f), self.enc0[1].map(f)],
            down1: self.down1.map(f),
            enc1: [self.enc1[0].map(f), self.enc1[1].map(f)],
            down2: self.down2.map(f),
            enc2: [self.enc2[0].map(f), self.enc2[1].map(f)],
            gru_z: self.gru_z.map(f),
            gru_r: self.gru_r.map(f),
            gru_h: self.gru_h.map(f),
            dec2: [self.dec2[0].map(f), self.dec2[1].map(f)],
            up1: self.up1.map(f),
            dec1: [self.dec1[0].map(f), self.dec1[1].map(f)],
            up2: self.up2.map(f),
            dec0: [self.dec0[0].map(f), self.dec0[1].map(f)],
            conv_out: self.conv_out.map(f),
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&'a V)) {
        let f = &mut f;
        self.conv_in.visit(f);
        self.enc0[0].visit(f);
        self.enc0[1].visit(f);
        self.down1.visit(f);
        self.enc1[0].visit(f);
        self.enc1[1].visit(f);
        self.down2.visit(f);
        self.enc2[0].visit(f);
        self.enc2[1].visit(f);
        self.gru_z.visit(f);
        self.gru_r.visit(f);
        self.gru_h.visit(f);
        self.dec2[0].visit(f);
        self.dec2[1].visit(f);
        self.up1.visit(f);
        self.dec1[0].visit(f);
        self.dec1[1].visit(f);
        self.up2.visit(f);
        self.dec0[0].visit(f);
        self.dec0[1].visit(f);
        self.conv_out.visit(f);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&'a mut V)) {
        let f = &mut f;
        let Net {
            conv_in,
            enc0: [e0a, e0b],
            down1,
            enc1: [e1a, e1b],
            down2,
            enc2: [e2a, e2b],
            gru_z,
            gru_r,
            gru_h,
            dec2: [d2a, d2b],
            up1,
            dec1: [d1a, d1b],
            up2,
            dec0: [d0a, d0b],
            conv_out,
        } = self;
        conv_in.visit_mut(f);
        e0a.visit_mut(f);
        e0b.visit_mut(f);
        down1.visit_mut(f);
        e1a.visit_mut(f);
        e1b.visit_mut(f);
        down2.visit_mut(f);
        e2a.visit_mut(f);
        e2b.visit_mut(f);
        gru_z.visit_mut(f);
        gru_r.visit_mut(f);
        gru_h.visit_mut(f);
        d2a.visit_mut(f);
        d2b.visit_mut(f);
        up1.visit_mut(f);
        d1a.visit_mut(f);
        d1b.visit_mut(f);
        up2.visit_mut(f);
        d0a.visit_mut(f);
        d0b.visit_mut(f);
        conv_out.visit_mut(f);
    }
}

/// State carried from one iteration to the next inside a pass: two decoder
/// feature maps and the GRU hidden state.
#[derive(Clone, Debug)]
pub struct RecurrentState<S: Scalar> {
    /// Half-resolution decoder features, `w1` channels.
    pub f1: Tensor<S>,
    /// Full-resolution decoder features, `w0` channels.
    pub f2: Tensor<S>,
    /// GRU hidden state at quarter resolution, `w2` channels.
    pub h: Tensor<S>,
}

impl<S: Scalar> RecurrentState<S> {
    /// All-zero state for the first iteration of a pass.
    pub fn zeros(widths: Widths, batch: usize, height: usize, width: usize) -> Self {
        RecurrentState {
            f1: Tensor::zeros([batch, widths.w1, height / 2, width / 2]),
            f2: Tensor::zeros([batch, widths.w0, height, width]),
            h: Tensor::zeros([batch, widths.w2, height / 4, width / 4]),
        }
    }

    fn validate(&self, widths: Widths, image: &Tensor<S>) -> Result<()> {
        let [b, _, h, w] = image.shape();
        let want_f1 = [b, widths.w1, h / 2, w / 2];
        let want_f2 = [b, widths.w0, h, w];
        let want_h = [b, widths.w2, h / 4, w / 4];
        if self.f1.shape() != want_f1 || self.f2.shape() != want_f2 || self.h.shape() != want_h {
            return Err(Error::shape(
                "recurrent state",
                format!(
                    "for image {:?} expected F1 {:?}, F2 {:?}, h {:?}; got {:?}, {:?}, {:?}",
                    image.shape(),
                    want_f1,
                    want_f2,
                    want_h,
                    self.f1.shape(),
                    self.f2.shape(),
                    self.h.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Learnable parameters of the unit, shared across every iteration and pass.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub widths: Widths,
    pub net: Net<Tensor<S>>,
}

fn xavier_weight<S: Scalar>(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize, fan_out: usize) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
        .collect();
    Tensor::new(shape, data)
}

fn xavier_conv<S: Scalar>(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize) -> ConvP<Tensor<S>> {
    ConvP {
        weight: xavier_weight(rng, [c_out, c_in, 3, 3], c_in * 9, c_out * 9),
        bias: Tensor::zeros([c_out, 1, 1, 1]),
    }
}

fn xavier_deconv<S: Scalar>(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> ConvP<Tensor<S>> {
    ConvP {
        weight: xavier_weight(rng, [c_in, c_out, 3, 3], c_in * 9, c_out * 9),
        bias: Tensor::zeros([c_out, 1, 1, 1]),
    }
}

fn res_block_params<S: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> ResBlockP<Tensor<S>> {
    ResBlockP {
        conv1: xavier_conv(rng, c, c),
        conv2: xavier_conv(rng, c, c),
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Xavier-initialized parameters; biases start at zero. Two calls with
    /// the same seed and widths produce identical parameters.
    pub fn init(widths: Widths, seed: u64) -> Result<Self> {
        widths.validate()?;
        let Widths { w0, w1, w2 } = widths;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let net = Net {
            conv_in: xavier_conv(rng, w0, 3),
            enc0: [res_block_params(rng, w0), res_block_params(rng, w0)],
            down1: xavier_conv(rng, w1, 2 * w0),
            enc1: [res_block_params(rng, w1), res_block_params(rng, w1)],
            down2: xavier_conv(rng, w2, 2 * w1),
            enc2: [res_block_params(rng, w2), res_block_params(rng, w2)],
            gru_z: xavier_conv(rng, w2, 2 * w2),
            gru_r: xavier_conv(rng, w2, 2 * w2),
            gru_h: xavier_conv(rng, w2, 2 * w2),
            dec2: [res_block_params(rng, w2), res_block_params(rng, w2)],
            up1: xavier_deconv(rng, w2, w1),
            dec1: [res_block_params(rng, w1), res_block_params(rng, w1)],
            up2: xavier_deconv(rng, 2 * w1, w0),
            dec0: [res_block_params(rng, w0), res_block_params(rng, w0)],
            conv_out: xavier_conv(rng, 3, 2 * w0),
        };
        Ok(ModelParams { widths, net })
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.net.visit(|t| n += t.len());
        n
    }

    /// Flat view of all parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut v = Vec::new();
        self.net.visit(|t| v.push(t));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = Vec::new();
        self.net.visit_mut(|t| v.push(t));
        v
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            widths: self.widths,
            net: self.net.map(|t| t.cast::<T>()),
        }
    }

    /// Zero the output head so the unit emits an exactly zero residual and
    /// the network becomes the identity. Used by tests and debug tooling.
    pub fn zero_output_head(&mut self) {
        self.conv_out_mut().weight = Tensor::zeros(self.net.conv_out.weight.shape());
        self.conv_out_mut().bias = Tensor::zeros(self.net.conv_out.bias.shape());
    }

    fn conv_out_mut(&mut self) -> &mut ConvP<Tensor<S>> {
        &mut self.net.conv_out
    }

    fn validate_input(&self, image: &Tensor<S>, context: &'static str) -> Result<()> {
        image.validate_image(context)?;
        let c = image.channels();
        if c != 3 {
            return Err(Error::shape(context, format!("expected 3 channels, got {c}")));
        }
        Ok(())
    }

    /// Encoder half of the unit: returns the bottleneck latent and the two
    /// skip feature maps `[s0, s1]` consumed by the decoder.
    pub fn encoder_forward(
        &self,
        image: &Tensor<S>,
        state: &RecurrentState<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        self.validate_input(image, "encoder_forward")?;
        state.validate(self.widths, image)?;
        let mut bk = EvalBackend;
        let enc = encoder_with(&mut bk, &self.net, image, &state.f1, &state.f2);
        Ok((enc.latent, vec![enc.s0, enc.s1]))
    }

    /// One convolutional GRU step at the bottleneck.
    pub fn gru_step(&self, h_prev: &Tensor<S>, e: &Tensor<S>) -> Result<Tensor<S>> {
        if h_prev.shape() != e.shape() || h_prev.channels() != self.widths.w2 {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "h_prev {:?} and latent {:?} must both be (B, {}, H/4, W/4)",
                    h_prev.shape(),
                    e.shape(),
                    self.widths.w2
                ),
            ));
        }
        let mut bk = EvalBackend;
        Ok(gru_with(&mut bk, &self.net, h_prev, e))
    }

    /// Decoder half: consumes the GRU state and the encoder skips, returns
    /// the signed residual image and the two recurrence feature maps.
    pub fn decoder_forward(
        &self,
        h: &Tensor<S>,
        skips: &[Tensor<S>],
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        if skips.len() != 2 {
            return Err(Error::shape(
                "decoder_forward",
                format!("expected 2 skip maps [s0, s1], got {}", skips.len()),
            ));
        }
        let (s0, s1) = (&skips[0], &skips[1]);
        let [b, c, hh, hw] = h.shape();
        if c != self.widths.w2
            || s1.shape() != [b, self.widths.w1, hh * 2, hw * 2]
            || s0.shape() != [b, self.widths.w0, hh * 4, hw * 4]
        {
            return Err(Error::shape(
                "decoder_forward",
                format!(
                    "h {:?}, s0 {:?}, s1 {:?} inconsistent with widths {:?}",
                    h.shape(),
                    s0.shape(),
                    s1.shape(),
                    self.widths
                ),
            ));
        }
        let mut bk = EvalBackend;
        let dec = decoder_with(&mut bk, &self.net, h, s0, s1);
        Ok((dec.residual, dec.f1, dec.f2))
    }

    /// One full unit application: `image_out = image + residual`, plus the
    /// next recurrent state. Pure function of its inputs.
    pub fn unit_forward(
        &self,
        image: &Tensor<S>,
        state: &RecurrentState<S>,
    ) -> Result<(Tensor<S>, RecurrentState<S>)> {
        self.validate_input(image, "unit_forward")?;
        state.validate(self.widths, image)?;
        let mut bk = EvalBackend;
        let out = unit_with(&mut bk, &self.net, image, &StateVals {
            f1: state.f1.clone(),
            f2: state.f2.clone(),
            h: state.h.clone(),
        });
        Ok((
            out.image_out,
            RecurrentState {
                f1: out.state.f1,
                f2: out.state.f2,
                h: out.state.h,
            },
        ))
    }

    /// Run `n` unit iterations from a fresh all-zero state, chaining image
    /// and state. Returns every intermediate image and residual.
    pub fn progressive_deblur(&self, blurry: &Tensor<S>, n: usize) -> Result<DeblurTrace<S>> {
        if n < 1 {
            return Err(Error::Config("iteration count N must be >= 1".into()));
        }
        self.validate_input(blurry, "progressive_deblur")?;
        let [b, _, h, w] = blurry.shape();
        let mut state = StateVals {
            f1: Tensor::zeros([b, self.widths.w1, h / 2, w / 2]),
            f2: Tensor::zeros([b, self.widths.w0, h, w]),
            h: Tensor::zeros([b, self.widths.w2, h / 4, w / 4]),
        };
        let mut image = blurry.clone();
        let mut per_iter = Vec::with_capacity(n);
        let mut residuals = Vec::with_capacity(n);
        let mut bk = EvalBackend;
        for _ in 0..n {
            let out = unit_with(&mut bk, &self.net, &image, &state);
            image = out.image_out.clone();
            state = out.state;
            per_iter.push(out.image_out);
            residuals.push(out.residual);
        }
        Ok(DeblurTrace { per_iter, residuals })
    }

    /// Apply the whole `n`-iteration pass `times` times, feeding each pass
    /// the previous final output; every pass starts from a fresh zero state.
    /// Returns the final image of each pass.
    pub fn re_deblur(&self, input: &Tensor<S>, times: usize, n: usize) -> Result<Vec<Tensor<S>>> {
        if times < 1 {
            return Err(Error::Config("re-deblur times must be >= 1".into()));
        }
        let mut current = input.clone();
        let mut finals = Vec::with_capacity(times);
        for _ in 0..times {
            let trace = self.progressive_deblur(&current, n)?;
            current = trace.final_image().clone();
            finals.push(current.clone());
        }
        Ok(finals)
    }
}

/// Intermediate images and residuals of one deblurring pass.
#[derive(Clone, Debug)]
pub struct DeblurTrace<S: Scalar> {
    pub per_iter: Vec<Tensor<S>>,
    pub residuals: Vec<Tensor<S>>,
}

impl<S: Scalar> DeblurTrace<S> {
    pub fn final_image(&self) -> &Tensor<S> {
        self.per_iter.last().expect("trace has at least one iteration")
    }
}

// ---------------------------------------------------------------------------
// Wiring, written once and instantiated for tensors and for graph nodes.
// ---------------------------------------------------------------------------

/// Execution target for the unit wiring.
pub trait Backend<S: Scalar> {
    type Val: Clone;
    /// 3x3 convolution with padding 1 and the given stride.
    fn conv(&mut self, x: &Self::Val, p: &ConvP<Self::Val>, stride: usize) -> Self::Val;
    /// 3x3 transposed convolution, stride 2, padding 1: doubles H and W.
    fn deconv(&mut self, x: &Self::Val, p: &ConvP<Self::Val>) -> Self::Val;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn sigmoid(&mut self, x: &Self::Val) -> Self::Val;
    fn tanh(&mut self, x: &Self::Val) -> Self::Val;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn one_minus(&mut self, x: &Self::Val) -> Self::Val;
    fn concat(&mut self, parts: &[&Self::Val]) -> Self::Val;
}

/// Direct tensor evaluation (no gradients retained).
pub struct EvalBackend;

impl<S: Scalar> Backend<S> for EvalBackend {
    type Val = Tensor<S>;

    fn conv(&mut self, x: &Tensor<S>, p: &ConvP<Tensor<S>>, stride: usize) -> Tensor<S> {
        conv::conv2d(x, &p.weight, Some(&p.bias), stride, 1)
    }
    fn deconv(&mut self, x: &Tensor<S>, p: &ConvP<Tensor<S>>) -> Tensor<S> {
        conv::deconv2d(x, &p.weight, Some(&p.bias), 2, 1, 1)
    }
    fn relu(&mut self, x: &Tensor<S>) -> Tensor<S> {
        x.relu()
    }
    fn sigmoid(&mut self, x: &Tensor<S>) -> Tensor<S> {
        x.sigmoid()
    }
    fn tanh(&mut self, x: &Tensor<S>) -> Tensor<S> {
        x.tanh_elem()
    }
    fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        a.add(b)
    }
    fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        a.mul(b)
    }
    fn one_minus(&mut self, x: &Tensor<S>) -> Tensor<S> {
        x.one_minus()
    }
    fn concat(&mut self, parts: &[&Tensor<S>]) -> Tensor<S> {
        Tensor::concat_channels(parts)
    }
}

/// Graph-building evaluation for training.
pub struct GraphBackend<'g, S: Scalar> {
    pub g: &'g mut Graph<S>,
}

impl<'g, S: Scalar> Backend<S> for GraphBackend<'g, S> {
    type Val = NodeId;

    fn conv(&mut self, x: &NodeId, p: &ConvP<NodeId>, stride: usize) -> NodeId {
        self.g.conv(*x, p.weight, Some(p.bias), stride, 1)
    }
    fn deconv(&mut self, x: &NodeId, p: &ConvP<NodeId>) -> NodeId {
        self.g.deconv(*x, p.weight, Some(p.bias), 2, 1)
    }
    fn relu(&mut self, x: &NodeId) -> NodeId {
        self.g.relu(*x)
    }
    fn sigmoid(&mut self, x: &NodeId) -> NodeId {
        self.g.sigmoid(*x)
    }
    fn tanh(&mut self, x: &NodeId) -> NodeId {
        self.g.tanh(*x)
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.g.add(*a, *b)
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.g.mul(*a, *b)
    }
    fn one_minus(&mut self, x: &NodeId) -> NodeId {
        self.g.one_minus(*x)
    }
    fn concat(&mut self, parts: &[&NodeId]) -> NodeId {
        let ids: Vec<NodeId> = parts.iter().map(|&&p| p).collect();
        self.g.concat(&ids)
    }
}

/// Recurrent state in backend value space.
#[derive(Clone)]
pub struct StateVals<V> {
    pub f1: V,
    pub f2: V,
    pub h: V,
}

pub struct UnitOut<V> {
    pub image_out: V,
    pub residual: V,
    pub state: StateVals<V>,
}

struct EncOut<V> {
    latent: V,
    s0: V,
    s1: V,
}

struct DecOut<V> {
    residual: V,
    f1: V,
    f2: V,
}

fn res_block<S: Scalar, B: Backend<S>>(bk: &mut B, p: &ResBlockP<B::Val>, x: &B::Val) -> B::Val {
    let a = bk.conv(x, &p.conv1, 1);
    let r = bk.relu(&a);
    let b = bk.conv(&r, &p.conv2, 1);
    bk.add(x, &b)
}

fn encoder_with<S: Scalar, B: Backend<S>>(
    bk: &mut B,
    net: &Net<B::Val>,
    image: &B::Val,
    f1: &B::Val,
    f2: &B::Val,
) -> EncOut<B::Val> {
    let mut x = bk.conv(image, &net.conv_in, 1);
    for blk in &net.enc0 {
        x = res_block(bk, blk, &x);
    }
    let s0 = x.clone();
    let cat0 = bk.concat(&[&s0, f2]);
    let mut x = bk.conv(&cat0, &net.down1, 2);
    for blk in &net.enc1 {
        x = res_block(bk, blk, &x);
    }
    let s1 = x.clone();
    let cat1 = bk.concat(&[&s1, f1]);
    let mut x = bk.conv(&cat1, &net.down2, 2);
    for blk in &net.enc2 {
        x = res_block(bk, blk, &x);
    }
    EncOut { latent: x, s0, s1 }
}

fn gru_with<S: Scalar, B: Backend<S>>(
    bk: &mut B,
    net: &Net<B::Val>,
    h_prev: &B::Val,
    e: &B::Val,
) -> B::Val {
    let he = bk.concat(&[h_prev, e]);
    let z_pre = bk.conv(&he, &net.gru_z, 1);
    let z = bk.sigmoid(&z_pre);
    let r_pre = bk.conv(&he, &net.gru_r, 1);
    let r = bk.sigmoid(&r_pre);
    let rh = bk.mul(&r, h_prev);
    let rhe = bk.concat(&[&rh, e]);
    let cand_pre = bk.conv(&rhe, &net.gru_h, 1);
    let cand = bk.tanh(&cand_pre);
    let keep = bk.one_minus(&z);
    let kept = bk.mul(&keep, h_prev);
    let new = bk.mul(&z, &cand);
    bk.add(&kept, &new)
}

fn decoder_with<S: Scalar, B: Backend<S>>(
    bk: &mut B,
    net: &Net<B::Val>,
    h: &B::Val,
    s0: &B::Val,
    s1: &B::Val,
) -> DecOut<B::Val> {
    let mut x = h.clone();
    for blk in &net.dec2 {
        x = res_block(bk, blk, &x);
    }
    let mut x = bk.deconv(&x, &net.up1);
    for blk in &net.dec1 {
        x = res_block(bk, blk, &x);
    }
    let f1 = x.clone();
    let cat1 = bk.concat(&[&f1, s1]);
    let mut x = bk.deconv(&cat1, &net.up2);
    for blk in &net.dec0 {
        x = res_block(bk, blk, &x);
    }
    let f2 = x.clone();
    let cat0 = bk.concat(&[&f2, s0]);
    let residual = bk.conv(&cat0, &net.conv_out, 1);
    DecOut { residual, f1, f2 }
}

/// One unit application on an arbitrary backend.
pub fn unit_with<S: Scalar, B: Backend<S>>(
    bk: &mut B,
    net: &Net<B::Val>,
    image: &B::Val,
    state: &StateVals<B::Val>,
) -> UnitOut<B::Val> {
    let enc = encoder_with(bk, net, image, &state.f1, &state.f2);
    let h = gru_with(bk, net, &state.h, &enc.latent);
    let dec = decoder_with(bk, net, &h, &enc.s0, &enc.s1);
    let image_out = bk.add(image, &dec.residual);
    UnitOut {
        image_out,
        residual: dec.residual,
        state: StateVals {
            f1: dec.f1,
            f2: dec.f2,
            h,
        },
    }
}

// ---------------------------------------------------------------------------
// Graph construction for training.
// ---------------------------------------------------------------------------

/// Insert every parameter tensor into the graph as a grad-enabled leaf.
pub fn bind_params<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>) -> Net<NodeId> {
    params.net.map(|t| g.leaf(t.clone(), true))
}

/// Collect gradients for bound parameters in canonical order. Layers that
/// received no gradient (possible only if the loss ignores them) yield zeros.
pub fn collect_param_grads<S: Scalar>(
    params: &ModelParams<S>,
    bound: &Net<NodeId>,
    grads: &mut crate::graph::Gradients<S>,
) -> Vec<Tensor<S>> {
    let mut ids = Vec::new();
    bound.visit(|&id| ids.push(id));
    let mut out = Vec::with_capacity(ids.len());
    for (id, t) in ids.iter().zip(params.tensors()) {
        out.push(grads.take(*id).unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    out
}

/// Node ids of one pass built on the graph.
pub struct GraphPass {
    pub per_iter: Vec<NodeId>,
    pub residuals: Vec<NodeId>,
}

impl GraphPass {
    pub fn final_image(&self) -> NodeId {
        *self.per_iter.last().expect("pass has at least one iteration")
    }
}

/// Build `times` deblurring passes of `n` iterations each on the graph,
/// chaining pass k's final image into pass k+1 (gradients flow through all
/// passes). Each pass starts from a fresh zero recurrent state.
pub fn re_deblur_graph<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Net<NodeId>,
    widths: Widths,
    input: NodeId,
    times: usize,
    n: usize,
) -> Vec<GraphPass> {
    assert!(times >= 1 && n >= 1);
    let [b, _, h, w] = g.value(input).shape();
    let mut passes = Vec::with_capacity(times);
    let mut current = input;
    for _ in 0..times {
        let f1 = g.leaf(Tensor::zeros([b, widths.w1, h / 2, w / 2]), false);
        let f2 = g.leaf(Tensor::zeros([b, widths.w0, h, w]), false);
        let h0 = g.leaf(Tensor::zeros([b, widths.w2, h / 4, w / 4]), false);
        let mut state = StateVals { f1, f2, h: h0 };
        let mut per_iter = Vec::with_capacity(n);
        let mut residuals = Vec::with_capacity(n);
        let mut image = current;
        for _ in 0..n {
            let mut bk = GraphBackend { g };
            let out = unit_with(&mut bk, bound, &image, &state);
            image = out.image_out;
            state = out.state;
            per_iter.push(out.image_out);
            residuals.push(out.residual);
        }
        current = image;
        passes.push(GraphPass { per_iter, residuals });
    }
    passes
}

/// Loss attached to the pass outputs: `lambda * L1(out_1, out_2) + sum_j
/// alpha_j * L1(out_j, target)`. Returns (total, idem, sharp) node ids; the
/// idem node is absent when `lambda == 0` or only one pass was built.
pub fn total_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    pass_finals: &[NodeId],
    target: NodeId,
    weights: &loss::LossWeights<S>,
) -> Result<LossNodes> {
    weights.validate(pass_finals.len())?;
    let mean = weights.reduction == loss::Reduction::Mean;
    let mut sharp_terms = Vec::new();
    for (&out, &alpha) in pass_finals.iter().zip(&weights.alpha) {
        let l = g.abs_diff_loss(out, target, mean);
        sharp_terms.push((alpha, l));
    }
    let sharp = g.weighted_sum(&sharp_terms);
    let idem = if weights.lambda_idem > S::zero() {
        Some(g.abs_diff_loss(pass_finals[0], pass_finals[1], mean))
    } else {
        None
    };
    let total = match idem {
        Some(idem_id) => g.weighted_sum(&[(S::one(), sharp), (weights.lambda_idem, idem_id)]),
        None => sharp,
    };
    Ok(LossNodes { total, sharp, idem })
}

pub struct LossNodes {
    pub total: NodeId,
    pub sharp: NodeId,
    pub idem: Option<NodeId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_hit_param_budget() {
        let p = ModelParams::<f32>::init(Widths::default(), 0).unwrap();
        let n = p.count_params() as f64;
        let target = 3.11e6;
        assert!(
            (n - target).abs() / target <= 0.10,
            "param count {n} outside 10% of {target}"
        );
        assert_eq!(p.count_params(), 3_038_043);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = ModelParams::<f32>::init(Widths::new(4, 8, 16), 7).unwrap();
        let b = ModelParams::<f32>::init(Widths::new(4, 8, 16), 7).unwrap();
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = ModelParams::<f32>::init(Widths::new(4, 8, 16), 8).unwrap();
        assert_ne!(
            a.net.conv_in.weight.data(),
            c.net.conv_in.weight.data(),
            "different seeds must differ"
        );
        assert!(a.net.down1.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernels_are_3x3() {
        let p = ModelParams::<f32>::init(Widths::new(1, 1, 1), 7).unwrap();
        let mut weight_count = 0;
        p.net.visit(|t| {
            if t.shape()[2] > 1 || t.shape()[3] > 1 {
                weight_count += 1;
                assert_eq!((t.shape()[2], t.shape()[3]), (3, 3));
            }
        });
        assert_eq!(weight_count, 33, "expected 33 conv kernels");
    }

    #[test]
    fn rejects_zero_widths() {
        assert!(ModelParams::<f32>::init(Widths::new(0, 1, 1), 0).is_err());
        assert!(ModelParams::<f32>::init(Widths::new(1, 0, 1), 0).is_err());
    }

    #[test]
    fn latent_shape_after_two_downsamplings() {
        let widths = Widths::new(4, 8, 16);
        let p = ModelParams::<f32>::init(widths, 0).unwrap();
        let img = Tensor::zeros([1, 3, 16, 16]);
        let state = RecurrentState::zeros(widths, 1, 16, 16);
        let (latent, skips) = p.encoder_forward(&img, &state).unwrap();
        assert_eq!(latent.shape(), [1, 16, 4, 4]);
        assert_eq!(skips[0].shape(), [1, 4, 16, 16]);
        assert_eq!(skips[1].shape(), [1, 8, 8, 8]);
    }

    #[test]
    fn zero_head_makes_identity() {
        let widths = Widths::new(3, 5, 7);
        let mut p = ModelParams::<f64>::init(widths, 3).unwrap();
        p.zero_output_head();
        let img = Tensor::from_fn([2, 3, 8, 8], |b, c, y, x| {
            ((b + 1) * (c + 2)) as f64 * 0.01 + (y as f64) * 0.002 - (x as f64) * 0.001
        });
        for times in [1usize, 3] {
            let outs = p.re_deblur(&img, times, 4).unwrap();
            for out in outs {
                assert_eq!(out, img, "zero residual head must be a fixed point");
            }
        }
    }

    #[test]
    fn progressive_deblur_rejects_zero_iters() {
        let p = ModelParams::<f32>::init(Widths::new(2, 3, 4), 0).unwrap();
        let img = Tensor::zeros([1, 3, 8, 8]);
        assert!(p.progressive_deblur(&img, 0).is_err());
        assert!(p.re_deblur(&img, 0, 1).is_err());
    }
}
