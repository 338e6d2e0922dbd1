//! AdamW with decoupled weight decay over a flat list of tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub hyper: AdamWHyper,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(hyper: AdamWHyper, tensor_lens: &[usize]) -> Self {
        AdamWState {
            hyper,
            step: 0,
            first: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moment(&self, tensor: usize) -> &[f64] {
        &self.first[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[f64] {
        &self.second[tensor]
    }

    /// One update. Gradients are validated before any parameter is touched, so
    /// a rejected step leaves both parameters and state unchanged.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::dim(
                "adamw tensor count",
                self.first.len(),
                params.len().max(grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::dim(
                    format!("adamw tensor {i} length"),
                    self.first[i].len(),
                    p.len().max(g.len()),
                ));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor {i} at element {j}; step aborted"
                )));
            }
        }

        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let decay = 1.0 - h.lr * h.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}
