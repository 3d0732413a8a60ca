//! SGD with momentum and learning-rate decay, Adam, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Only applied by SGD: `lr / (1 + decay * epoch)`.
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.015,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_decay: 0.05,
            clip_norm: 5.0,
            batch_size: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip norm must be > 0");
        }
        if self.weight_decay < 0.0 || self.lr_decay < 0.0 {
            return bad("decay terms must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * epoch as f64)
    }
}

/// `v ← μv − lr_t (g + λθ); θ ← θ + v`, with `lr_t = lr₀ / (1 + decay·epoch)`.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimConfig, epoch: usize) {
    let lr = T::lit(cfg.lr_at(epoch));
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for p in store.params_mut() {
        if p.slots.is_empty() {
            p.slots.push(crate::tensor::Tensor::zeros(p.value.shape()));
        }
        let vel = p.slots[0].data_mut();
        for ((v, x), &g) in vel.iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
            *v = mu * *v - lr * (g + wd * *x);
            *x += *v;
        }
    }
}

/// Bias-corrected Adam; `step` counts from 1.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimConfig, step: usize) {
    let step = step.max(1) as i32;
    let lr = T::lit(cfg.learning_rate);
    let (b1, b2) = (T::lit(cfg.adam_beta1), T::lit(cfg.adam_beta2));
    let eps = T::lit(cfg.adam_eps);
    let wd = T::lit(cfg.weight_decay);
    let c1 = T::one() - b1.powi(step);
    let c2 = T::one() - b2.powi(step);
    for p in store.params_mut() {
        while p.slots.len() < 2 {
            p.slots.push(crate::tensor::Tensor::zeros(p.value.shape()));
        }
        let (m_slot, v_slot) = p.slots.split_at_mut(1);
        let (m, v) = (m_slot[0].data_mut(), v_slot[0].data_mut());
        for i in 0..p.value.len() {
            let x = p.value.data()[i];
            let g = p.grad.data()[i] + wd * x;
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.value.data_mut()[i] = x - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when already within bounds).
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: T) -> T {
    let norm = store.global_grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        store.scale_grads(s);
        s
    } else {
        T::one()
    }
}
