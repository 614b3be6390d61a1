use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Rmsprop,
    Sgd,
}

/// Optimizer hyperparameters.
///
/// `decay` depends on `kind`: for RMSProp it is the moving-average coefficient
/// of the squared gradients, for SGD it is the per-step learning-rate decay
/// `lr_t = lr / (1 + decay * t)`. `lr_decay` applies the same inverse-time
/// schedule to RMSProp; it is ignored for SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub lr_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::rmsprop(0.1, 0.5)
    }
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64, decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            learning_rate,
            decay,
            epsilon: 1e-8,
            lr_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64, decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            decay,
            epsilon: 1e-8,
            lr_decay: 0.0,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            p.push(format!(
                "optimizer.learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            p.push(format!("optimizer.decay must be >= 0, got {}", self.decay));
        }
        if self.kind == OptimizerKind::Rmsprop && self.decay >= 1.0 {
            p.push(format!(
                "optimizer.decay is the RMSProp averaging coefficient and must be < 1, got {}",
                self.decay
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            p.push(format!("optimizer.epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            p.push(format!("optimizer.lr_decay must be >= 0, got {}", self.lr_decay));
        }
        p
    }
}

/// Mutable optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Squared-gradient moving averages (RMSProp only; empty for SGD).
    pub rmsprop_avg: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let rmsprop_avg = match config.kind {
            OptimizerKind::Rmsprop => vec![0.0; param_count],
            OptimizerKind::Sgd => Vec::new(),
        };
        Ok(Self {
            config,
            rmsprop_avg,
            steps: 0,
        })
    }

    pub fn current_learning_rate(&self) -> f64 {
        let t = self.steps as f64;
        match self.config.kind {
            OptimizerKind::Sgd => self.config.learning_rate / (1.0 + self.config.decay * t),
            OptimizerKind::Rmsprop => self.config.learning_rate / (1.0 + self.config.lr_decay * t),
        }
    }

    /// Apply one update in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        let lr = self.current_learning_rate();
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Rmsprop => {
                let rho = self.config.decay;
                let eps = self.config.epsilon;
                for ((p, g), a) in params.iter_mut().zip(grad).zip(&mut self.rmsprop_avg) {
                    *a = rho * *a + (1.0 - rho) * g * g;
                    *p -= lr * g / (a.sqrt() + eps);
                }
            }
        }
        self.steps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_learning_rate_decays_inverse_time() {
        let mut s = OptimizerState::new(OptimizerConfig::sgd(0.01, 1e-6), 1).unwrap();
        s.steps = 1_000_000;
        assert!((s.current_learning_rate() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step_normalizes_gradient() {
        let mut s = OptimizerState::new(OptimizerConfig::rmsprop(0.1, 0.5), 2).unwrap();
        let mut p = vec![0.0, 0.0];
        s.apply(&mut p, &[4.0, -0.25]);
        // avg = 0.5 g^2, step = lr * g / sqrt(0.5 g^2) = lr * sqrt(2) * sign(g)
        let expected = 0.1 * 2f64.sqrt();
        assert!((p[0] + expected).abs() < 1e-7);
        assert!((p[1] - expected).abs() < 1e-7);
        assert!(s.rmsprop_avg.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn rejects_negative_rate() {
        assert!(OptimizerState::new(OptimizerConfig::sgd(-1.0, 0.0), 1).is_err());
        assert!(OptimizerState::new(OptimizerConfig::rmsprop(0.1, 1.5), 1).is_err());
    }
}
