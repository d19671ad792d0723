//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
        }
    }
}

/// Per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<F>>,
}

/// L2 norm over every gradient entry, accumulated in f64.
pub fn global_norm<F: Scalar>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!("invalid optimizer settings {config:?}")));
        }
        Ok(AdamW {
            config,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<F>> {
        &self.state
    }

    /// Restore from persisted moments.
    pub fn restore(config: AdamWConfig, step: u64, state: BTreeMap<String, Moments<F>>) -> Result<Self> {
        let mut opt = Self::new(config)?;
        opt.step = step;
        opt.state = state;
        Ok(opt)
    }

    /// One update. Parameters without an entry in `grads` are left untouched,
    /// including their moments and weight decay. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore<F>, mut grads: BTreeMap<String, Tensor<F>>) -> Result<f64> {
        let norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (ob1, ob2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step_size = c.lr / bc1;
        let sqrt_bc2 = bc2.sqrt();
        for (name, g) in grads {
            let param = store.get(&name)?;
            if !param.trainable {
                continue;
            }
            if param.value.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("gradient for '{name}' has shape {:?}", g.shape())));
            }
            let decay = if param.decay { c.weight_decay } else { 0.0 };
            let mom = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape().to_vec()),
                v: Tensor::zeros(g.shape().to_vec()),
            });
            let p = store.value_mut(&name)?;
            let shrink = F::from_f64(1.0 - c.lr * decay);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *m = b1 * *m + ob1 * gi;
                *v = b2 * *v + ob2 * gi * gi;
                let denom = v.as_f64().sqrt() / sqrt_bc2 + c.eps;
                *w = *w * shrink - F::from_f64(step_size * m.as_f64() / denom);
            }
        }
        Ok(norm)
    }
}
