//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::nn::mlp::{Gradients, Mlp};

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
        }
    }

    pub fn for_mlp(learning_rate: f64, mlp: &Mlp) -> Self {
        Self::new(learning_rate, mlp.param_count())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self) -> usize {
        self.first.len()
    }

    /// One update over parameter groups laid out back to back. Rejects the
    /// whole update if any gradient is non-finite.
    pub fn step_groups(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        let gtotal: usize = grads.iter().map(|g| g.len()).sum();
        if total != self.first.len() || gtotal != total || params.len() != grads.len() {
            return Err(Error::DimensionMismatch { expected: self.first.len(), actual: gtotal });
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.first[k];
                let v = &mut self.second[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_groups(&mut [params], &[grads])
    }

    pub fn step_mlp(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let flat: Vec<&[f64]> = grads
            .layers
            .iter()
            .flat_map(|(w, b)| {
                [w.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")]
            })
            .collect();
        let mut slices = mlp.param_slices_mut();
        self.step_groups(&mut slices, &flat)
    }
}
