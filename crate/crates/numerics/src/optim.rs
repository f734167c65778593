//! AdamW with decoupled weight decay.

use crate::tensor::Tensor;
use crate::{NumericsError, Result};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the step count.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_shapes: &[Vec<usize>]) -> Self {
        let m = param_shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        let v = param_shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// One decoupled-weight-decay update over all parameters.
    ///
    /// `names` is used only for diagnostics; a non-finite gradient rejects the
    /// whole step before any parameter is touched.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NumericsError::Optim(format!(
                "parameter/gradient count mismatch: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, grad) in grads.iter().enumerate() {
            if params[i].shape() != grad.shape() {
                return Err(NumericsError::Optim(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    grad.shape(),
                    names.get(i).map(String::as_str).unwrap_or("?"),
                    params[i].shape()
                )));
            }
            if !grad.all_finite() {
                return Err(NumericsError::NonFiniteGrad {
                    name: names
                        .get(i)
                        .cloned()
                        .unwrap_or_else(|| format!("param#{i}")),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut next = params[i].data().to_vec();
            for j in 0..next.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                next[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * next[j]);
            }
            params[i] = Tensor::new(params[i].shape().to_vec(), next).expect("same shape");
        }
        Ok(())
    }
}
