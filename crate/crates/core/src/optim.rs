//! Adam with bias correction and L2-style weight decay.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::params::{ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// First and second moments keyed by parameter.
    pub moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            learning_rate,
            weight_decay,
            moments: BTreeMap::new(),
        }
    }

    /// One Adam update of a single parameter buffer. `step` must already have
    /// been advanced for this round.
    fn update_one(&mut self, id: ParamId, param: &mut [f64], grad: &[f64]) {
        let (m, v) = self
            .moments
            .entry(id)
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i] + self.weight_decay * param[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let denom = (v[i] / bc2).sqrt() + self.epsilon;
            param[i] -= self.learning_rate * m_hat / denom;
        }
    }

    /// Update a raw buffer under `id`; advances the step counter.
    pub fn step_slice(&mut self, id: ParamId, param: &mut [f64], grad: &[f64]) {
        self.step += 1;
        self.update_one(id, param, grad);
    }

    /// Update every parameter in `ids`. Parameters without a gradient are treated
    /// as having a zero gradient, so weight decay and momentum still apply.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &Gradients) {
        self.step += 1;
        for &id in ids {
            let value = store.value_mut(id).data_mut();
            match grads.param(id) {
                Some(g) => self.update_one(id, value, g),
                None => {
                    let zeros = vec![0.0; value.len()];
                    self.update_one(id, value, &zeros);
                }
            }
        }
    }
}
