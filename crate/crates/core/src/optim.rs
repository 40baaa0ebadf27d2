//! Adam optimizer and the cosine learning-rate schedule.

use crate::error::{DenasError, Result};
use crate::graph::Parameter;
use crate::tensor::TensorData;
use serde::{Deserialize, Serialize};

/// Serializable optimizer state for checkpoint/resume.
#[derive(Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
    pub t: u64,
}

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list given at construction; the list must stay stable.
pub struct Adam {
    params: Vec<Parameter>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<TensorData>,
    v: Vec<TensorData>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<Parameter>, lr: f64) -> Self {
        let m = params.iter().map(|p| TensorData::zeros(p.shape())).collect();
        let v = params.iter().map(|p| TensorData::zeros(p.shape())).collect();
        Adam {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            m: self.m.clone(),
            v: self.v.clone(),
            t: self.t,
        }
    }

    pub fn restore(&mut self, state: AdamState) -> Result<()> {
        if state.m.len() != self.params.len() || state.v.len() != self.params.len() {
            return Err(DenasError::arg("adam_restore", "state length mismatch"));
        }
        self.m = state.m;
        self.v = state.v;
        self.t = state.t;
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            if !grad.all_finite() {
                return Err(DenasError::Diverged(format!(
                    "non-finite gradient on {}",
                    p.name()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, &gj) in grad.data.iter().enumerate() {
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
            }
            let lr = self.lr;
            let (eps, m_ref, v_ref) = (self.eps, &*m, &*v);
            p.update(|j, val| {
                let mh = m_ref.data[j] / bc1;
                let vh = v_ref.data[j] / bc2;
                val - lr * mh / (vh.sqrt() + eps)
            });
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `epochs - 1`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr_max;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
