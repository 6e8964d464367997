//! Dense 4-D tensors in `(batch, channel, height, width)` layout.
//!
//! Everything numeric in this crate is generic over [`Scalar`], so the same
//! code runs in `f32` (training default) and `f64` (gradient checks).

use crate::error::{Error, Result};
use num_traits::Float;

/// Floating-point element type with a GEMM kernel attached.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Dtype tag stored in checkpoint headers.
    const DTYPE: &'static str;
    /// Bytes per element in serialized form.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` for row-major `a (m,k)`, `b (k,n)`,
    /// `c (m,n)` with explicit strides, delegating to `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Sign with the subgradient convention `sign(0) = 0`.
///
/// Note `Float::signum` maps `0.0` to `1.0`, which is the wrong convention
/// for L1 losses at their optimum.
pub fn l1_sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Contiguous `(B, C, H, W)` tensor, row-major with `W` fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: [usize; 4],
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: [usize; 4], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: S) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    /// Scalar wrapped as a `[1,1,1,1]` tensor (loss values live here).
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[S] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut S {
        let i = self.idx(b, c, y, x);
        &mut self.data[i]
    }

    /// The single value of a `[1,1,1,1]` tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }
    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }
    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }
    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(|v| S::one() / (S::one() + (-v).exp()))
    }

    pub fn tanh_elem(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn one_minus(&self) -> Self {
        self.map(|v| S::one() - v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean of `|a - b|` over every element, accumulated in f64.
    pub fn mean_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape, "mean_abs_diff shape mismatch");
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().into_f64())
            .sum();
        S::from_f64(sum / self.len() as f64)
    }

    /// Sum of `|a - b|` over every element, accumulated in f64.
    pub fn sum_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape, "sum_abs_diff shape mismatch");
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().into_f64())
            .sum();
        S::from_f64(sum)
    }

    /// Concatenate along the channel axis. All parts must agree on B, H, W.
    pub fn concat_channels(parts: &[&Tensor<S>]) -> Self {
        assert!(!parts.is_empty());
        let [b, _, h, w] = parts[0].shape;
        let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        for p in parts {
            assert_eq!(
                (p.shape[0], p.shape[2], p.shape[3]),
                (b, h, w),
                "concat_channels spatial/batch mismatch"
            );
        }
        let mut out = Tensor::zeros([b, c_total, h, w]);
        let plane = h * w;
        for bi in 0..b {
            let mut c_off = 0;
            for p in parts {
                let pc = p.shape[1];
                let src = &p.data[bi * pc * plane..(bi + 1) * pc * plane];
                let dst_start = (bi * c_total + c_off) * plane;
                out.data[dst_start..dst_start + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        out
    }

    /// Copy of channels `[c_start, c_start + c_len)`.
    pub fn slice_channels(&self, c_start: usize, c_len: usize) -> Self {
        let [b, c, h, w] = self.shape;
        assert!(c_start + c_len <= c, "slice_channels out of range");
        let plane = h * w;
        let mut out = Tensor::zeros([b, c_len, h, w]);
        for bi in 0..b {
            let src_start = (bi * c + c_start) * plane;
            let dst_start = bi * c_len * plane;
            out.data[dst_start..dst_start + c_len * plane]
                .copy_from_slice(&self.data[src_start..src_start + c_len * plane]);
        }
        out
    }

    /// Convert elementwise to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| T::from_f64(v.into_f64())).collect(),
        }
    }

    /// Check that H and W are divisible by 4 and every entry is finite, as
    /// required before feeding a tensor through the network.
    pub fn validate_image(&self, context: &'static str) -> Result<()> {
        let [_, _, h, w] = self.shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                context,
                format!("spatial size {h}x{w} must be divisible by 4"),
            ));
        }
        if !self.all_finite() {
            return Err(Error::Numeric(format!(
                "{context}: image contains non-finite values"
            )));
        }
        Ok(())
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8.min(self.len())])
        }
    }
}

/// Stack single-image tensors (batch size 1 each) into one batch.
pub fn stack_batch<S: Scalar>(items: &[&Tensor<S>]) -> Tensor<S> {
    assert!(!items.is_empty());
    let [_, c, h, w] = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        assert_eq!(t.shape(), [1, c, h, w], "stack_batch expects 1xCxHxW items");
        data.extend_from_slice(t.data());
    }
    Tensor::new([items.len(), c, h, w], data)
}
