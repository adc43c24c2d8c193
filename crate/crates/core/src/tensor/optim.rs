//! AdamW with linear learning-rate warmup and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::params::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`.
    /// Zero disables warmup.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

/// Optimizer state: step count plus first/second moment buffers, one pair
/// per parameter, laid out to match the `ParamSet` it was built for.
pub struct AdamW {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|id| vec![0.0; params.tensor(id).numel()])
            .collect();
        let v = (0..params.len())
            .map(|id| vec![0.0; params.tensor(id).numel()])
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate that the *next* step will use.
    pub fn current_lr(&self) -> f64 {
        let t = (self.step + 1) as f64;
        if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (t / self.cfg.warmup_steps as f64).min(1.0)
        }
    }

    /// One update. `grads` must be indexed by `ParamId`, one gradient vector
    /// per parameter (the layout `ParamSet::zero_grads` produces). Every
    /// gradient is validated before anything is mutated, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam step: {} gradient buffers for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in grads.iter().enumerate() {
            if g.len() != params.tensor(id).numel() {
                return Err(Error::shape(format!(
                    "adam step: gradient for '{}' has {} values, parameter has {}",
                    params.name(id),
                    g.len(),
                    params.tensor(id).numel()
                )));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient in '{}' at flat index {pos}; update rejected",
                    params.name(id)
                )));
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let lr = if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (t / self.cfg.warmup_steps as f64).min(1.0)
        };
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);

        for (id, g) in grads.iter().enumerate() {
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = params.tensor_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                // Decoupled decay: shrink toward zero independently of the
                // adaptive step.
                p[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}
