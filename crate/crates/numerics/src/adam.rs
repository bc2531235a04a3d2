use crate::error::{NumericsError, Result};
use crate::params::ParamStore;

/// Adam with bias correction. Moments are allocated lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` from its accumulated gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        let tensors = params.tensors_mut();
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != tensors.len() {
            return Err(NumericsError::shape(
                "adam_step",
                &[self.m.len()],
                &[tensors.len()],
            ));
        }
        for (t, m) in tensors.iter().zip(&self.m) {
            if t.numel() != m.len() {
                return Err(NumericsError::shape("adam_step", t.shape(), &[m.len()]));
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().map(<[f64]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
