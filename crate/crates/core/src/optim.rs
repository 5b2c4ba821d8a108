//! Adam without weight decay, with optional global-norm clipping.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store
            .entries()
            .iter()
            .map(|e| e.shape.iter().product())
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: None,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip = Some(max_norm);
        self
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Apply one update. `grads` is aligned with the store's entries.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam" });
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let mut w = store.get(id)?.clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, wj) in w.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *wj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            store.set(id, w)?;
        }
        Ok(norm)
    }
}
