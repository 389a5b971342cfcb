//! Training algorithms: Adam with L2 weight decay, LBFGS with Armijo
//! backtracking, natural-gradient steps for Gaussian variational parameters,
//! and a central-difference gradient checker.

mod adam;
mod fdcheck;
mod lbfgs;
mod natgrad;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use fdcheck::{finite_diff_check, FD_ABS_FLOOR};
pub use lbfgs::{lbfgs_minimize, Lbfgs, LbfgsResult, StepStatus as LbfgsStatus};
pub use natgrad::{natgrad_step, QGradient};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adam,
    Lbfgs,
    Natgrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lbfgs_history: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    fn base(algorithm: Algorithm, learning_rate: f64) -> Self {
        OptimizerConfig {
            algorithm,
            learning_rate,
            weight_decay: 0.0,
            lbfgs_history: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::base(Algorithm::Adam, learning_rate)
    }

    pub fn lbfgs(learning_rate: f64) -> Self {
        Self::base(Algorithm::Lbfgs, learning_rate)
    }

    pub fn natgrad(learning_rate: f64) -> Self {
        Self::base(Algorithm::Natgrad, learning_rate)
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::arg(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.lbfgs_history < 1 {
            return Err(Error::arg("LBFGS history must be at least 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::arg("weight decay must be nonnegative"));
        }
        Ok(())
    }
}
