use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Auxiliary-loss coefficient used in stage 2.
    pub alpha: f64,
    pub seed: u64,
    pub adam: AdamWConfig,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Share of stage-1 steps during which the whole dense model trains
    /// before the base is frozen behind LoRA adapters.
    pub warm_start: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr_max: 3e-4,
            lr_min: 3e-5,
            epochs: 30,
            batch_size: 32,
            alpha: 0.01,
            seed: 0,
            adam: AdamWConfig::default(),
            grad_clip: 1.0,
            warm_start: 0.2,
        }
    }
}

impl TrainConfig {
    /// Large-model recipe: 2e-5 peak, batch 144, 5 epochs.
    pub fn large_preset() -> Self {
        Self {
            lr_max: 2e-5,
            lr_min: 0.0,
            epochs: 5,
            batch_size: 144,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.stage == 1 || self.stage == 2) {
            return fail("stage must be 1 or 2");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return fail("need 0 <= lr_min <= lr_max");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warm_start) {
            return fail("warm_start must lie in [0, 1]");
        }
        if self.alpha < 0.0 || self.grad_clip < 0.0 {
            return fail("alpha and grad_clip must be non-negative");
        }
        Ok(())
    }
}
