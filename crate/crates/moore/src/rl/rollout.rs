//! Experience containers shared by the two trainers.

use crate::envs::Action;

use super::RlError;

/// One stored environment transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub task: usize,
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub absorbing: bool,
    pub last: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<(), RlError> {
        if !self.reward.is_finite() {
            return Err(RlError::Contract("non-finite reward in transition".into()));
        }
        if self.absorbing && !self.last {
            return Err(RlError::Contract(
                "absorbing transition must also be last".into(),
            ));
        }
        Ok(())
    }
}

/// One on-policy step with the log-probability and value estimates taken at
/// collection time. `next_value` already folds in the truncation bootstrap
/// (and is ignored at absorbing states).
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub obs: Vec<f64>,
    pub action: Action,
    pub ctx: usize,
    pub reward: f64,
    pub absorbing: bool,
    pub last: bool,
    pub logp: f64,
    pub value: f64,
    pub next_value: f64,
}

/// Episode-contiguous sequences, one sub-batch per active task.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub per_task: Vec<Vec<RolloutStep>>,
}

impl RolloutBatch {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            per_task: vec![Vec::new(); n_tasks],
        }
    }

    pub fn total_steps(&self) -> usize {
        self.per_task.iter().map(|t| t.len()).sum()
    }
}
