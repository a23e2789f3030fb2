//! Cross-entropy training: Adam, the epoch loop with per-epoch train and
//! validation tracking, and the versioned checkpoint container.

mod adam;
mod checkpoint;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CLASS_MAP_TEXT};
pub use loss::cross_entropy;
pub use trainer::{evaluate, train_epoch, EpochRecord, EvalOutcome, TrainTrace};

use crate::error::{Error, Result};

/// Optimization regime: Adam at a fixed learning rate, no schedule,
/// no weight decay, no early stopping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// A learning rate of exactly 0 is allowed for diagnostics runs (flat
    /// trace); everything else still validates.
    pub fn validate_allow_frozen(&self) -> Result<()> {
        if self.learning_rate == 0.0 {
            let mut probe = *self;
            probe.learning_rate = 1.0;
            probe.validate()
        } else {
            self.validate()
        }
    }
}
