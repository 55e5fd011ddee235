use crate::error::{contract_err, Result};
use crate::model::Params;
use crate::scalar::Scalar;
use crate::substrate::Tensor;

use super::TrainConfig;

/// Adam with global-norm clipping. Moments are kept in 64-bit.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(cfg: &TrainConfig, params: &Params<S>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip: cfg.grad_clip,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step<S: Scalar>(&mut self, params: &mut Params<S>, grads: &[Tensor<S>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(contract_err!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x.widen() * x.widen())
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].widen() * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let upd = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                if upd != 0.0 {
                    *w = S::narrow(w.widen() - upd);
                }
            }
        }
        Ok(norm)
    }
}
