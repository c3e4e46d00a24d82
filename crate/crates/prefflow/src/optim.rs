//! First-order optimizers with linear learning-rate warm-up.

use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_steps: usize,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, warmup_steps: usize) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate, warmup_steps }
    }

    pub fn sgd(learning_rate: f64, warmup_steps: usize) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate, warmup_steps }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state over a fixed set of trainable parameter names.
pub struct Optimizer {
    config: OptimizerConfig,
    step: usize,
    /// Per-trainable-param first/second moments (Adam only), keyed by name.
    moments: Vec<(String, Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, trainable: &[String], params: &ParamSet) -> Self {
        let moments = trainable
            .iter()
            .map(|name| {
                let shape = params
                    .get(name)
                    .unwrap_or_else(|| panic!("unknown trainable parameter {name}"))
                    .shape()
                    .to_vec();
                (name.clone(), Tensor::zeros(&shape), Tensor::zeros(&shape))
            })
            .collect();
        Optimizer { config, step: 0, moments }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Effective learning rate after linear warm-up.
    pub fn current_lr(&self) -> f64 {
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.config.learning_rate * warm
    }

    /// Apply one update from `grads` to the trainable subset of `params`.
    /// Parameters outside the trainable set are untouched.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        let lr = self.current_lr();
        for (name, m, v) in &mut self.moments {
            let g = grads.get(name).expect("gradient for trainable param");
            let p = params.get_mut(name).expect("trainable param exists");
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let t = (self.step + 1) as i32;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for ((pv, gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        self.step += 1;
    }
}
