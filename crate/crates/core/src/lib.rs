//! Recurrent residual deblurring with an idempotence constraint.
//!
//! The crate implements a shared-weight encoder-decoder unit that restores a
//! blurry image by progressive residual refinement. The same unit is applied
//! `N` times per pass, carrying two decoder feature maps and a convolutional
//! GRU hidden state between iterations. Training re-applies the whole pass to
//! its own output and penalizes the difference between the two pass outputs,
//! which pushes the learned operator toward a fixed point: re-running the
//! model on an already-restored image should change nothing.
//!
//! Modules:
//! - [`tensor`]: dense `(B, C, H, W)` tensors, generic over `f32`/`f64`.
//! - [`conv`]: convolution kernels (im2col + GEMM) and their adjoints.
//! - [`graph`]: reverse-mode autodiff tape over the tensor ops.
//! - [`net`]: the encoder-decoder unit, recurrence wiring, and deblur loops.
//! - [`loss`]: sharp (L1) and idempotence losses.
//! - [`data`]: synthetic blur generation by frame averaging, augmentation.
//! - [`optim`]: Adam and the step-decay learning-rate schedule.
//! - [`trainer`]: training loop, checkpoints, metrics log.
//! - [`eval`]: PSNR/SSIM, re-deblurring stability probe, residual statistics.

pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
