//! Adam with bias correction and decoupled weight decay, plus the stepwise
//! learning-rate schedule used by every experiment.

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index} changed size: state {state} vs gradient {grad}")]
    ShapeMismatch {
        index: usize,
        state: usize,
        grad: usize,
    },
    #[error("optimizer built for {state} parameters, got {got}")]
    ParamCountMismatch { state: usize, got: usize },
    #[error("epoch {epoch} out of range for {epochs} training epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `lr · wd · param` subtraction, outside the
    /// moment estimates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        Adam {
            config,
            step: 0,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters, with the learning rate supplied per
    /// call so schedules stay outside the optimizer.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ParamCountMismatch {
                state: self.m.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (index, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.numel() != self.m[index].len() || grad.len() != self.m[index].len() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    state: self.m[index].len(),
                    grad: grad.len().max(param.numel()),
                });
            }
            let (m, v) = (&mut self.m[index], &mut self.v[index]);
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                let p = &mut param.data[k];
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps) + lr * c.weight_decay * *p;
            }
        }
        Ok(())
    }
}

/// Stepwise decay: the base rate for the first third of training, ×0.1 for
/// the middle third, ×0.01 for the final third (integer-exact boundaries).
pub fn lr_at(base_lr: f64, epochs: usize, epoch: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(OptimError::EpochOutOfRange { epoch, epochs });
    }
    Ok(if 3 * epoch >= 2 * epochs {
        base_lr * 0.01
    } else if 3 * epoch >= epochs {
        base_lr * 0.1
    } else {
        base_lr
    })
}
