//! SGD with classical momentum and Adam.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("parameter tensor {index} has {params} values but its gradient has {grads}")]
    ShapeMismatch { index: usize, params: usize, grads: usize },
    #[error("expected {expected} tensors, got {found}")]
    TensorCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

impl OptimizerKind {
    /// 1e-5 for Adam, 1e-4 for momentum SGD.
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Adam => 1e-5,
            OptimizerKind::Momentum => 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `v <- mu v + g; p <- p - lr v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// One bias-corrected Adam update; `step` is the 1-based index of this update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    config: &OptimizerConfig,
) {
    let t = step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
}

/// Optimizer with one moment buffer (two for Adam) per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match config.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::Momentum => Vec::new(),
        };
        Self {
            config,
            first: zeros(),
            second,
            step: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Momentum velocity or Adam first moment of tensor `i`.
    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first[i]
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), OptimError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(OptimError::TensorCount {
                expected: self.first.len(),
                found: params.len().min(grads.len()),
            });
        }
        for (index, ((p, g), buf)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.len() != g.len() || p.len() != buf.len() {
                return Err(OptimError::ShapeMismatch {
                    index,
                    params: p.len(),
                    grads: g.len(),
                });
            }
        }
        self.step += 1;
        let cfg = self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match cfg.kind {
                OptimizerKind::Momentum => sgd_momentum_step(p, g, &mut self.first[i], cfg.lr, cfg.momentum),
                OptimizerKind::Adam => adam_step(p, g, &mut self.first[i], &mut self.second[i], self.step, &cfg),
            }
        }
        Ok(())
    }
}
