use crate::error::{Result, TensorError};
use crate::tensor::ParamSet;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update of every parameter, then clears the gradients.
    ///
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&self, params: &mut ParamSet) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(TensorError::State(format!(
                "adam step requested but parameter `{}` has no gradient",
                p.name
            )));
        }
        for p in params.iter_mut() {
            let grad = p.tensor.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let data = p.tensor.data_mut();
            for (j, g) in grad.iter().enumerate() {
                p.adam_m[j] = self.beta1 * p.adam_m[j] + (1.0 - self.beta1) * g;
                p.adam_v[j] = self.beta2 * p.adam_v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = p.adam_m[j] / bc1;
                let v_hat = p.adam_v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
