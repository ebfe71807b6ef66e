use crate::error::{Error, Result};
use crate::model::{Gradients, ParamGroup, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::shape(format!(
                "optimizer state for {} parameters, got {} and {}",
                self.m.len(),
                m.len(),
                v.len()
            )));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }

    /// One update with a learning rate per parameter group.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        if grads.0.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("gradient, moment and parameter sizes differ"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let spans: Vec<_> = params.entries().iter().map(|e| (e.range(), e.group)).collect();
        let values = params.values_mut();
        for (range, group) in spans {
            let rate = lr(group);
            for k in range {
                let g = grads.0[k];
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                let update = (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + self.eps);
                values[k] -= rate * (update + self.weight_decay * values[k]);
            }
        }
        Ok(())
    }
}
