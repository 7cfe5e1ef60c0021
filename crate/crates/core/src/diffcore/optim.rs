use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
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

/// Bias-corrected Adam. Moments are created lazily with the parameter shape.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if store.get(id).shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
