use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied only to tensors of rank ≥ 2 so that
    /// biases and per-channel scales are left alone.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    /// Per-parameter update counts for bias correction.
    t: Vec<u64>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `grads[i]` may be `None` for a
    /// parameter that received no gradient this step; it is left untouched
    /// and its own step count does not advance.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<&Tensor<S>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
            self.t = vec![0; params.len()];
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam_step", &[self.m.len()], &[params.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::shape("adam_step", &[self.m[i].len()], p.shape()));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam_step", p.shape(), g.shape()));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let b1 = S::of(c.beta1);
        let b2 = S::of(c.beta2);
        let one = S::one();
        let lr = S::of(c.lr);
        let eps = S::of(c.eps);
        let decay = S::one() - S::of(c.lr * c.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            self.t[i] += 1;
            let bc1 = S::of(1.0 - c.beta1.powi(self.t[i] as i32));
            let bc2 = S::of(1.0 - c.beta2.powi(self.t[i] as i32));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if c.weight_decay > 0.0 && p.rank() >= 2 {
                p.data_mut().iter_mut().for_each(|x| *x *= decay);
            }
            let data = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
