//! Adam optimizer and the step-decay learning-rate schedule.

use crate::tensor::{Scalar, Tensor};

/// Adam hyperparameters (defaults per the usual recipe).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a flat list of parameter tensors. The order must match
/// `ModelParams::tensors()` and stays fixed for the lifetime of the run.
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, param_shapes: &[[usize; 4]]) -> Self {
        Adam {
            cfg,
            m: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update with bias-corrected moments:
    /// `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param layout mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/grad layout mismatch");
        self.t += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (one - b1) * gd[i];
                vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
                let m_hat = md[i] / corr1;
                let v_hat = vd[i] / corr2;
                pd[i] = pd[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// `lr0 * 0.5^floor(epoch / decay_every)`.
pub fn lr_schedule(lr0: f64, decay_every: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / decay_every.max(1)) as i32)
}
