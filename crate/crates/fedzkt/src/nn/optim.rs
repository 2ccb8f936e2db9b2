//! SGD and Adam on flat parameter vectors, plus the step-wise learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state for one parameter vector. `learning_rate` is public so a
/// scheduler can set the effective rate before each step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// SGD momentum coefficient; zero disables the momentum buffer.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    buf1: Vec<f64>,
    buf2: Vec<f64>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, weight_decay: f64, param_len: usize) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay,
            momentum: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step_count: 0,
            buf1: vec![0.0; param_len],
            buf2: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64, param_len: usize) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            buf1: vec![0.0; param_len],
            buf2: vec![0.0; param_len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update in place. Weight decay is added to the raw
    /// gradient before any moment accumulation.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                context: "optimizer step",
                left: params.len(),
                right: grads.len(),
            });
        }
        if params.len() != self.buf1.len() {
            return Err(Error::LengthMismatch {
                context: "optimizer buffers",
                left: params.len(),
                right: self.buf1.len(),
            });
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                if self.momentum == 0.0 {
                    for (p, g) in params.iter_mut().zip(grads) {
                        *p -= lr * (g + wd * *p);
                    }
                } else {
                    let mu = self.momentum;
                    for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.buf1) {
                        *m = mu * *m + (g + wd * *p);
                        *p -= lr * *m;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.buf1.iter_mut().zip(&mut self.buf2))
                {
                    let g = g + wd * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Step-wise decay: the base rate is multiplied by `drop` once the step
/// index reaches half of `total_steps` and again at three quarters.
pub fn lr_schedule(base: f64, step: usize, total_steps: usize, drop: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let mut lr = base;
    if 2 * step >= total_steps {
        lr *= drop;
    }
    if 4 * step >= 3 * total_steps {
        lr *= drop;
    }
    lr
}
