//! Adam with a linear warmup / linear decay learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate rises linearly over the first `warmup_fraction` of all
/// batches, then falls linearly toward zero at the last batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).floor() as usize;
        Self {
            base_lr,
            total_steps,
            warmup_steps,
        }
    }

    /// Rate for the 0-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let remaining = self.total_steps.saturating_sub(step);
        self.base_lr * remaining as f64 / decay as f64
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    /// Advances the shared step counter; call once per batch before updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::shape("adam", param.shape(), &[grad.len()]));
        }
        if self.step == 0 {
            return Err(Error::Contract("Adam::update before begin_step".into()));
        }
        let n = param.len();
        let st = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
