//! Adam with L2 weight decay and the warmup / step learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::config::OptimConfig;
use crate::error::Result;
use crate::model::ParamStore;

/// Learning rate for a 0-based epoch: linear warmup to the base rate, then
/// multiplied by `gamma` at each milestone reached.
pub fn lr_at(optim: &OptimConfig, epoch: usize) -> f64 {
    if epoch < optim.warmup_epochs {
        return optim.lr * (epoch + 1) as f64 / optim.warmup_epochs as f64;
    }
    let passed = optim.decay_epochs.iter().filter(|&&m| epoch >= m).count();
    optim.lr * optim.gamma.powi(passed as i32)
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.params() {
            let Some(g) = grads.get(param.as_tensor()) else { continue };
            let theta = param.as_tensor().detach();
            let g = (g + theta.affine(self.weight_decay, 0.0)?)?;
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            param.set(&(theta - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
