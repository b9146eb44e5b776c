use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// `base · exp(−decay · epoch)`
pub fn decayed_learning_rate(base: f64, decay: f64, epoch: usize) -> f64 {
    base * (-decay * epoch as f64).exp()
}

/// Adam with bias correction. Weight decay is added to the gradient (L2 form).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} parameters, {} gradients, {} state slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.tensor.shape() != g.shape() || p.tensor.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), g.shape()),
                });
            }
        }
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let correction1 = T::of(1.0 - c.beta1.powi(self.steps as i32));
        let correction2 = T::of(1.0 - c.beta2.powi(self.steps as i32));
        let (lr, eps, decay) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        let one = T::one();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gv), mv), vv) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let grad = gv + decay * *w;
                *mv = b1 * *mv + (one - b1) * grad;
                *vv = b2 * *vv + (one - b2) * grad * grad;
                let m_hat = *mv / correction1;
                let v_hat = *vv / correction2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
