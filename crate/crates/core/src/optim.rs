//! Adam optimizer.

use thiserror::Error;

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// First and second moment of parameter `k`, if it has been updated.
    pub fn moments(&self, k: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(k)?.as_ref()?, self.v.get(k)?.as_ref()?))
    }

    /// One update of every parameter that has a gradient. Nothing changes
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), OptimError> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let k = id.index();
            let m = self.m[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[k].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
