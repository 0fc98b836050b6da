//! Adam and the multi-step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{EetError, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: ParamSet,
    second: ParamSet,
    step: u64,
}

impl Adam {
    /// `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`, moments shaped like `params`.
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.first
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.second
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.first) {
            return Err(EetError::contract(
                "parameter, gradient and moment layouts differ",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments)
        {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `base_lr · gamma^(milestones passed)`, never below `floor_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
    pub floor_lr: f64,
}

impl Default for Schedule {
    /// 1e-3 decayed ×0.1 at epochs 50, 100, 150 and 200, floored at 1e-7.
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            gamma: 0.1,
            milestones: vec![50, 100, 150, 200],
            floor_lr: 1e-7,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.floor_lr > 0.0 && self.floor_lr <= self.base_lr) {
            return Err(EetError::config(
                "learning rates must satisfy 0 < floor <= base",
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EetError::config("decay factor must be in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EetError::config("milestones must be strictly increasing"));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        (self.base_lr * self.gamma.powi(passed as i32)).max(self.floor_lr)
    }
}
