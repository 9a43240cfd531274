//! Adam with decoupled weight decay.
//!
//! Decay is applied straight to the parameters before the moment update, not
//! folded into the gradient, so the regularization strength does not get
//! rescaled by the adaptive step size.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("parameter group {group}: param len {params} != grad len {grads}")]
    GradLenMismatch {
        group: usize,
        params: usize,
        grads: usize,
    },
    #[error("optimizer built for {expected} parameter groups, got {actual}")]
    GroupCountMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// Moment estimates for one list of parameter tensors (flattened per tensor).
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    /// `sizes` gives the flat length of each parameter tensor in the group.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over the whole group. `params[i]` and `grads[i]` must have
    /// the lengths declared at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AdamError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(AdamError::GroupCountMismatch {
                expected: self.first_moment.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for (group, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[group].len() {
                return Err(AdamError::GradLenMismatch {
                    group,
                    params: p.len(),
                    grads: g.len(),
                });
            }
        }
        self.step_count += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for (group, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[group];
            let v = &mut self.second_moment[group];
            for i in 0..param.len() {
                // Decoupled decay first, then the adaptive step.
                param[i] -= c.learning_rate * c.weight_decay * param[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
