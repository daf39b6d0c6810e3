use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// Adam optimiser with bias-corrected moment estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients and clears them.
    ///
    /// Parameters without a gradient are left untouched. A non-finite
    /// gradient aborts the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = store.get(id).grad() {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "gradient".into(),
                        detail: format!("{}[{k}] = {}", store.name(id), g[k]),
                    });
                }
            }
        }
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids() {
            let tensor = store.get_mut(id);
            let Some(g) = tensor.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (k, p) in tensor.values_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
