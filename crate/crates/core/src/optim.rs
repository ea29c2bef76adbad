//! Adam with decoupled weight decay, global-norm clipping and the
//! warmup-then-linear-decay schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    pub config: AdamWConfig,
    slots: Vec<(String, Slot)>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Result<Self> {
        let mut slots = Vec::with_capacity(store.len());
        for (name, var) in store.iter() {
            let z = var.as_tensor().zeros_like()?;
            slots.push((
                name.to_string(),
                Slot {
                    var: var.clone(),
                    m: z.clone(),
                    v: z,
                },
            ));
        }
        Ok(Self { config, slots, t: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Global L2 norm of all parameter gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, s) in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += crate::nn::scalar_f64(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`, after scaling every gradient by
    /// `grad_scale`. Parameters without a gradient keep their moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (_, s) in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            // Moments must not keep the autograd history alive across steps.
            let g = (g.detach() * grad_scale)?;
            s.m = ((&s.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            s.v = ((&s.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let theta = s.var.as_tensor().detach();
            let decayed = if c.weight_decay != 0.0 {
                (&theta * (1.0 - lr * c.weight_decay))?
            } else {
                theta.clone()
            };
            s.var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }
}

/// Clip factor for a global gradient norm.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// Learning rate for 1-based step `s`: linear warmup to `base` over
/// `warmup` steps, then linear decay reaching zero at `total`.
pub fn warmup_decay_lr(base: f64, s: usize, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && s <= warmup {
        return base * s as f64 / warmup as f64;
    }
    if total <= warmup || s >= total {
        return if total <= warmup { base } else { 0.0 };
    }
    base * (total - s) as f64 / (total - warmup) as f64
}
