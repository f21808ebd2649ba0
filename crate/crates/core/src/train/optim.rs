//! Adam and SGD with momentum over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::config::{OptimizerConfig, OptimizerKind};
use crate::model::ParamStore;
use crate::tensor::Tensor;

use super::{Checkpoint, CheckpointError};

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer with per-parameter moment buffers, created lazily on first update.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    slots: BTreeMap<String, Slot>,
    /// Number of updates applied.
    pub t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one update to every trainable parameter from its accumulated grad.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            let n = p.value.numel();
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: match c.kind {
                    OptimizerKind::Adam => vec![0.0; n],
                    OptimizerKind::SgdMomentum => Vec::new(),
                },
            });
            let g = p.grad.data();
            let w = p.value.data_mut();
            match c.kind {
                OptimizerKind::Adam => {
                    for i in 0..n {
                        slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g[i];
                        slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for i in 0..n {
                        slot.m[i] = c.momentum * slot.m[i] + g[i];
                        w[i] -= c.lr * slot.m[i];
                    }
                }
            }
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("opt/t", Tensor::scalar(self.t as f64));
        for (name, s) in &self.slots {
            ckpt.insert(format!("opt/m/{name}"), Tensor::new(vec![s.m.len()], s.m.clone()).expect("1-d"));
            if !s.v.is_empty() {
                ckpt.insert(format!("opt/v/{name}"), Tensor::new(vec![s.v.len()], s.v.clone()).expect("1-d"));
            }
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, params: &ParamStore) -> Result<(), CheckpointError> {
        self.t = ckpt.get_shaped("opt/t", &[1])?.data()[0] as u64;
        self.slots.clear();
        for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
            let key = format!("opt/m/{name}");
            if !ckpt.arrays.contains_key(&key) {
                continue;
            }
            let n = p.value.numel();
            let m = ckpt.get_shaped(&key, &[n])?.data().to_vec();
            let v = match self.config.kind {
                OptimizerKind::Adam => ckpt.get_shaped(&format!("opt/v/{name}"), &[n])?.data().to_vec(),
                OptimizerKind::SgdMomentum => Vec::new(),
            };
            self.slots.insert(name.to_string(), Slot { m, v });
        }
        Ok(())
    }
}

/// Rescales all trainable grads so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
