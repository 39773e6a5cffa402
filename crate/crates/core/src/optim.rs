//! Adam and Adamax with decoupled weight decay, plus global-norm gradient
//! clipping. Parameter tensors whose gradient is entirely zero are skipped,
//! so a zero-gradient step is a true parameter no-op (the step counter still
//! advances).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adamax,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    /// Per-epoch multiplier applied by `decay_lr`.
    pub lr_decay: Real,
    pub step_count: u64,
    pub(crate) first: Vec<Vec<Real>>,
    /// Second raw moment (Adam) or infinity-norm accumulator (Adamax).
    pub(crate) second: Vec<Vec<Real>>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr: Real,
        weight_decay: Real,
        lr_decay: Real,
        params: &ModelParams,
    ) -> Self {
        let first = (0..params.len())
            .map(|i| vec![0.0; params.tensor(i).len()])
            .collect::<Vec<_>>();
        let second = first.clone();
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr_decay,
            step_count: 0,
            first,
            second,
        }
    }

    fn check_shapes(&self, params: &ModelParams) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.first.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            if params.tensor(i).len() != self.first[i].len() {
                return Err(Error::Contract(format!(
                    "optimizer state for {} has {} elements, parameter has {}",
                    params.name(i),
                    self.first[i].len(),
                    params.tensor(i).len()
                )));
            }
        }
        Ok(())
    }

    /// One update from the gradients accumulated on `params`.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        self.check_shapes(params)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        for i in 0..params.len() {
            let tensor = params.tensor_mut(i);
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Contract("parameter without gradient slot".into()))?;
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = grad.to_vec();
            let m = &mut self.first[i];
            let s = &mut self.second[i];
            let data = tensor.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let bias2 = 1.0 - self.beta2.powi(t);
                    for j in 0..data.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                        s[j] = self.beta2 * s[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                        let m_hat = m[j] / bias1;
                        let v_hat = s[j] / bias2;
                        data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
                OptimizerKind::Adamax => {
                    for j in 0..data.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                        s[j] = (self.beta2 * s[j]).max(grad[j].abs());
                        data[j] -= (self.lr / bias1) * m[j] / (s[j] + self.eps);
                    }
                }
            }
            if self.weight_decay > 0.0 {
                // decoupled: applied to the parameter directly
                for v in data.iter_mut() {
                    *v -= self.lr * self.weight_decay * *v;
                }
            }
        }
        Ok(())
    }

    /// Applies the per-epoch learning-rate decay factor.
    pub fn decay_lr(&mut self) {
        self.lr *= self.lr_decay;
    }
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the applied scale (1 when already inside the cap); direction is
/// always preserved.
pub fn clip_gradients(params: &mut ModelParams, max_norm: Real) -> Real {
    let norm = params.grad_l2_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for i in 0..params.len() {
        if let Some(g) = params.tensor_mut(i).grad_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    scale
}
