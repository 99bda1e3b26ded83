//! AdamW with decoupled weight decay and an exponential moving average of
//! the weights.

use crate::error::{Error, Result};

use super::params::{to_f32_grid, ParamSet};

/// Decay of the weight average used for evaluation.
pub const EMA_DECAY: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.tensors().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: zeros(params),
            second_moment: zeros(params),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One AdamW update. Frozen tensors are left untouched. The whole update
    /// is rejected if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
        if !params.same_layout(grads) || params.len() != self.first_moment.len() {
            return Err(Error::Config("gradient layout does not match the parameters".into()));
        }
        if let Some(bad) = grads.tensors().iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads.tensors()).enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data.iter_mut().enumerate() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let decayed = *w * (1.0 - lr * weight_decay);
                *w = to_f32_grid(decayed - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// `shadow ← decay · shadow + (1 - decay) · weights`.
pub fn ema_update(shadow: &mut ParamSet, weights: &ParamSet, decay: f64) {
    for (s, w) in shadow.tensors_mut().iter_mut().zip(weights.tensors()) {
        for (a, b) in s.data.iter_mut().zip(&w.data) {
            *a = to_f32_grid(decay * *a + (1.0 - decay) * b);
        }
    }
}
