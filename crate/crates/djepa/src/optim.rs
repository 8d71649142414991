//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};

/// Optimizer state for one parameter set. Moment buffers are allocated on
/// first use and always match the parameter layout.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight-decay coefficient applied this step. Callers ramp it
    /// externally (the training schedule owns the 0.02 → 0.2 line).
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a list of (name, parameter buffer, gradient,
    /// per-parameter weight-decay multiplier). The multiplier lets a
    /// parameter group opt out of decay (0.0) while sharing the step.
    ///
    /// A non-finite gradient aborts before touching any parameter and names
    /// the offending entry.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut [f64])],
        grads: &[&[f64]],
        decay_mask: &[f64],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), decay_mask.len());
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("param {name}: {} values vs {} grads", p.len(), g.len()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite("adamw_step gradient", *name));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed size");

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let wd = self.weight_decay * decay_mask[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + wd * p[j]);
            }
        }
        Ok(())
    }

    /// Moment buffers for checkpointing, in parameter order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn restore_moments(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, step: u64) {
        self.first = first;
        self.second = second;
        self.step = step;
    }
}
