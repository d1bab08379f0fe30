//! Plain first-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Tensor};
use crate::backbone::ParamStore;
use crate::error::{Error, Result};

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Momentum 0.9 with a cosine learning-rate decay to zero.
    SgdMomentum,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn buffers_per_param(self) -> usize {
        match self {
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        }
    }
}

/// Optimizer with its running state. `buffers` holds the momentum for SGD and
/// the first then second moment estimates for Adam, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Length of the cosine schedule in steps.
    pub total_steps: u64,
    pub steps_taken: u64,
    pub buffers: Vec<Array>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, total_steps: u64, params: &ParamStore) -> Self {
        let buffers = (0..kind.buffers_per_param())
            .flat_map(|_| params.tensors().iter().map(|t| Array::zeros(t.shape())))
            .collect();
        Self {
            kind,
            learning_rate,
            total_steps: total_steps.max(1),
            steps_taken: 0,
            buffers,
        }
    }

    /// Learning rate used for the next step.
    pub fn current_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adam => self.learning_rate,
            OptimizerKind::SgdMomentum => {
                let t = (self.steps_taken as f64 / self.total_steps as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        let n = params.len();
        if grads.len() != n || self.buffers.len() != n * self.kind.buffers_per_param() {
            return Err(Error::Input(format!("{} gradients for {n} parameters", grads.len())));
        }
        let lr = self.current_lr();
        self.steps_taken += 1;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for (i, g) in grads.iter().enumerate() {
                    let v = &mut self.buffers[i];
                    v.zip_mut_with(g.value(), |v, &g| *v = SGD_MOMENTUM * *v + g);
                    let next = params.get(i).value() - &(v.clone() * lr);
                    params.set(i, next)?;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = ADAM_BETAS;
                let t = self.steps_taken as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                let (m, v) = self.buffers.split_at_mut(n);
                for (i, g) in grads.iter().enumerate() {
                    m[i].zip_mut_with(g.value(), |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    v[i].zip_mut_with(g.value(), |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                    let mut next = params.get(i).value().clone();
                    ndarray::Zip::from(&mut next)
                        .and(&m[i])
                        .and(&v[i])
                        .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS));
                    params.set(i, next)?;
                }
            }
        }
        Ok(())
    }
}
