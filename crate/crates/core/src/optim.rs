//! First-order optimizers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::math;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }
}

/// Optimizer state. Moment buffers exist only for Adam and mirror the
/// parameter shapes of the store they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Config(alloc::format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let (m, v) = match config.kind {
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
                (zeros.clone(), zeros)
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            config,
            step_count: 0,
            first_moment: m,
            second_moment: v,
        })
    }

    /// Applies one update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        // validate before touching anything so a failed step is a no-op
        for id in params.ids() {
            let g = grads
                .param(id)
                .ok_or_else(|| Error::MissingGradient(params.name(id).into()))?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: params.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let c = self.config;
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        for id in params.ids() {
            let g = grads.param(id).expect("checked above").data();
            let p = params.get_mut(id).data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= c.learning_rate * (gi + c.weight_decay * *pi);
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first_moment[id.index()];
                    let v = &mut self.second_moment[id.index()];
                    for i in 0..p.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= c.learning_rate * (mhat / (math::sqrt(vhat) + c.epsilon) + c.weight_decay * p[i]);
                    }
                }
            }
        }
        Ok(())
    }
}
