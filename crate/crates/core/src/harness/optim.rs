use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Scale trainable gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
        let norm = params.grad_norm(|_| true);
        if norm > max_norm && norm.is_finite() {
            let s = T::of(max_norm / norm);
            for p in params.iter_mut().filter(|p| p.trainable) {
                p.grad = p.grad.scale(s);
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let lr = T::of(self.lr);
        let step_size = T::of(self.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let decay = if p.value.shape().len() >= 2 {
                T::one() - lr * T::of(self.weight_decay)
            } else {
                T::one()
            };
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + (T::one() - b1) * g[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * g[i] * g[i];
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                *w = *w * decay - step_size * md[i] / denom;
            }
        }
        Ok(())
    }
}
