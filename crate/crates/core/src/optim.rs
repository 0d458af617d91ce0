//! Adam with decoupled weight decay and the inverse-square-root schedule.

use crate::checkpoint::Container;
use crate::error::{invalid, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear warm-up from `warmup_init_lr` to `max_lr`, then `max_lr·√(warmup/step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSqrtSchedule {
    pub warmup_init_lr: f64,
    pub max_lr: f64,
    pub warmup_updates: u64,
}

impl Default for InverseSqrtSchedule {
    fn default() -> Self {
        InverseSqrtSchedule {
            warmup_init_lr: 1e-7,
            max_lr: 5e-4,
            warmup_updates: 4000,
        }
    }
}

impl InverseSqrtSchedule {
    /// Ramp value at `step`, valid for `step <= warmup_updates`.
    pub fn ramp(&self, step: u64) -> f64 {
        self.warmup_init_lr
            + (self.max_lr - self.warmup_init_lr) * step as f64 / self.warmup_updates as f64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1);
        if step < self.warmup_updates {
            self.ramp(step)
        } else {
            self.max_lr * (self.warmup_updates as f64 / step as f64).sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimiser state: first and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            names: params.iter().map(|(_, n, _)| n.to_string()).collect(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Applies one update. Rejects the whole step if any gradient entry is
    /// not finite, naming the first offending parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(invalid("gradient list does not match parameters"));
        }
        for ((id, name, t), g) in params.iter().zip(grads) {
            if g.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if name != self.names[id.index()] {
                return Err(invalid(format!("optimizer tracks `{}`, got `{name}`", self.names[id.index()])));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }

    pub fn write_to(&self, c: &mut Container) {
        c.push_meta("adam.step", self.step.to_string());
        for (k, name) in self.names.iter().enumerate() {
            c.push_tensor(format!("adam.m.{name}"), self.m[k].clone());
            c.push_tensor(format!("adam.v.{name}"), self.v[k].clone());
        }
    }

    pub fn read_from(config: AdamConfig, params: &ParamStore, c: &Container) -> Result<Self> {
        let mut adam = Adam::new(config, params);
        adam.step = c
            .require_meta("adam.step")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad adam.step".into()))?;
        for (k, name) in adam.names.clone().iter().enumerate() {
            for (slot, prefix) in [(0, "adam.m"), (1, "adam.v")] {
                let key = format!("{prefix}.{name}");
                let t = c
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if t.shape() != adam.m[k].shape() {
                    return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", t.shape())));
                }
                if slot == 0 {
                    adam.m[k] = t.clone();
                } else {
                    adam.v[k] = t.clone();
                }
            }
        }
        Ok(adam)
    }
}
