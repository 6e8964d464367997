//! Training losses: per-pass sharp supervision plus the idempotence penalty.
//!
//! Both losses are L1 distances. The idempotence term compares the outputs of
//! the first and second deblurring pass; driving it to zero makes re-applying
//! the network a no-op. L1 norms are mean-reduced by default so the loss
//! scale (and therefore `lambda` and the learning rate) does not depend on
//! image resolution; sum reduction stays available for ablations.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Loss weighting: one `alpha` per deblurring pass plus the idempotence
/// trade-off `lambda`.
#[derive(Clone, Debug)]
pub struct LossWeights<S> {
    pub alpha: Vec<S>,
    pub lambda_idem: S,
    pub reduction: Reduction,
}

impl<S: Scalar> LossWeights<S> {
    /// Paper defaults: alpha = (1, 1), lambda = 0.1, mean reduction.
    pub fn defaults() -> Self {
        LossWeights {
            alpha: vec![S::one(), S::one()],
            lambda_idem: S::from_f64(0.1),
            reduction: Reduction::Mean,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_idem = S::from_f64(lambda);
        self
    }

    pub fn validate(&self, num_outputs: usize) -> Result<()> {
        if self.alpha.iter().any(|a| *a < S::zero()) {
            return Err(Error::Config("loss alphas must be >= 0".into()));
        }
        if self.lambda_idem < S::zero() {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.alpha.len() != num_outputs {
            return Err(Error::Config(format!(
                "got {} outputs but {} alpha weights",
                num_outputs,
                self.alpha.len()
            )));
        }
        if self.lambda_idem > S::zero() && num_outputs < 2 {
            return Err(Error::Config(
                "idempotent loss needs at least two pass outputs".into(),
            ));
        }
        Ok(())
    }
}

fn l1<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, reduction: Reduction) -> Result<S> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l1 loss",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(match reduction {
        Reduction::Mean => a.mean_abs_diff(b),
        Reduction::Sum => a.sum_abs_diff(b),
    })
}

/// L1 distance between the first- and second-pass outputs (mean-reduced by
/// default). Zero iff the two are identical.
pub fn idempotent_loss<S: Scalar>(i1: &Tensor<S>, i2: &Tensor<S>) -> Result<S> {
    l1(i1, i2, Reduction::Mean)
}

pub fn idempotent_loss_with<S: Scalar>(
    i1: &Tensor<S>,
    i2: &Tensor<S>,
    reduction: Reduction,
) -> Result<S> {
    l1(i1, i2, reduction)
}

/// Weighted sum of per-pass L1 distances to the sharp target.
pub fn sharp_loss<S: Scalar>(
    outputs: &[Tensor<S>],
    target: &Tensor<S>,
    weights: &LossWeights<S>,
) -> Result<S> {
    if outputs.len() != weights.alpha.len() {
        return Err(Error::Config(format!(
            "got {} outputs but {} alpha weights",
            outputs.len(),
            weights.alpha.len()
        )));
    }
    let mut acc = S::zero();
    for (out, &alpha) in outputs.iter().zip(&weights.alpha) {
        acc = acc + alpha * l1(out, target, weights.reduction)?;
    }
    Ok(acc)
}

/// Components of the combined objective, kept separate for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents<S> {
    pub idem: S,
    pub sharp: S,
}

/// `total = lambda * idem(out_0, out_1) + sharp(outputs, target)`.
pub fn total_loss<S: Scalar>(
    outputs: &[Tensor<S>],
    target: &Tensor<S>,
    weights: &LossWeights<S>,
) -> Result<(S, LossComponents<S>)> {
    weights.validate(outputs.len())?;
    let sharp = sharp_loss(outputs, target, weights)?;
    let idem = if weights.lambda_idem > S::zero() {
        l1(&outputs[0], &outputs[1], weights.reduction)?
    } else if outputs.len() >= 2 {
        // still computed for logging when two outputs exist
        l1(&outputs[0], &outputs[1], weights.reduction)?
    } else {
        S::zero()
    };
    let total = weights.lambda_idem * idem + sharp;
    Ok((total, LossComponents { idem, sharp }))
}
