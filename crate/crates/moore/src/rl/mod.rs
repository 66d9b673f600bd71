//! Multi-task trainers and their supporting machinery: advantage
//! estimation, per-task replay, gradient surgery, the cosine-similarity
//! relaxation, and expert freezing for transfer runs.

pub mod cosine;
pub mod gae;
pub mod pcgrad;
pub mod ppo;
pub mod replay;
pub mod rollout;
pub mod sac;

pub use cosine::cosine_reg_loss;
pub use gae::{compute_gae, standardize, GaeResult};
pub use pcgrad::{pcgrad_project, project_pair};
pub use ppo::{ppo_update, PpoAgent, PpoConfig, PpoReport};
pub use replay::ReplayBuffer;
pub use rollout::{RolloutBatch, RolloutStep, Transition};
pub use sac::{
    gaussian_tanh_logp, polyak_update, sac_update, SacAgent, SacConfig, SacReport,
    TemperatureBank,
};

use crate::mixture::MixtureNet;

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("non-finite {what}; per-task losses: {per_task:?}")]
    NonFinite { what: String, per_task: Vec<f64> },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Gs(#[from] crate::mixture::GsError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
}

impl From<crate::numkit::Error> for RlError {
    fn from(e: crate::numkit::Error) -> Self {
        RlError::Gs(crate::mixture::GsError::Num(e))
    }
}

/// Excludes the expert stack from gradient accumulation; optimizers built
/// afterwards skip the frozen tensors entirely.
pub fn freeze_experts(net: &MixtureNet) {
    for p in net.expert_params() {
        p.set_requires_grad(false);
        p.zero_grad();
    }
}
