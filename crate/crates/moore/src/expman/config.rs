//! Experiment configuration: every hyperparameter is a named key with the
//! published default; suites pick their own architecture and trainer
//! defaults. Configs serialize as JSON and accept dotted-path overrides.

use serde::{Deserialize, Serialize};

use crate::envs::{ScMdpSuite, SuiteKind};
use crate::rl::{PpoConfig, SacConfig};

use super::ExpError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mtppo,
    Mtsac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprChoice {
    Moore,
    Moe,
    CosineSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Multi,
    Single,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    /// Conv expert stack (grid suites): output channels per layer.
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Dense expert stack (point suites): layer widths, last entry is d.
    pub dense_units: Vec<usize>,
    /// Hidden widths of the output functions (tanh between, linear out).
    pub head_hidden: Vec<usize>,
    /// Activation applied to the combined representation: tanh | linear.
    pub combine_activation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PpoParams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub policy_epochs: usize,
    pub policy_batch: usize,
    pub critic_epochs: usize,
    pub critic_batch: usize,
    pub lr_policy: f64,
    pub lr_critic: f64,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            policy_epochs: 8,
            policy_batch: 256,
            critic_epochs: 1,
            critic_batch: 2000,
            lr_policy: 1e-3,
            lr_critic: 1e-3,
        }
    }
}

impl PpoParams {
    pub fn to_rl(&self) -> PpoConfig {
        PpoConfig {
            gamma: self.gamma,
            lambda: self.gae_lambda,
            clip: self.clip_eps,
            entropy_coef: self.entropy_coef,
            policy_epochs: self.policy_epochs,
            policy_batch: self.policy_batch,
            critic_epochs: self.critic_epochs,
            critic_batch: self.critic_batch,
            lr_policy: self.lr_policy,
            lr_critic: self.lr_critic,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SacParams {
    pub gamma: f64,
    pub batch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub tau: f64,
    pub exploration_steps: usize,
    pub buffer_capacity: usize,
    pub train_frequency: usize,
}

impl Default for SacParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch: 128,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 1e-4,
            tau: 5e-3,
            exploration_steps: 1500,
            buffer_capacity: 1_000_000,
            train_frequency: 1,
        }
    }
}

impl SacParams {
    pub fn to_rl(&self) -> SacConfig {
        SacConfig {
            gamma: self.gamma,
            batch: self.batch,
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
            lr_alpha: self.lr_alpha,
            tau: self.tau,
            exploration_steps: self.exploration_steps,
            buffer_capacity: self.buffer_capacity,
            train_frequency: self.train_frequency,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub suite: String,
    pub algorithm: Algorithm,
    pub representation: ReprChoice,
    pub head_mode: HeadChoice,
    /// Expert count; defaults follow the suite (mt3 2, mt5 3, mt7 4;
    /// point_mt4 4, point_mt10 6).
    pub k: usize,
    pub pcgrad: bool,
    /// Actor and critic share one expert stack (mtppo only).
    pub share_experts: bool,
    /// Optional expert-order permutation applied before orthogonalization.
    pub expert_permutation: Option<Vec<usize>>,
    /// Source checkpoint for transfer runs.
    pub transfer_source: Option<String>,
    pub seeds: Vec<u64>,
    /// Environment-step budget summed over all task environments.
    pub total_steps: u64,
    /// Collection ticks per epoch (each tick steps every task env once).
    pub steps_per_epoch: usize,
    pub eval_episodes: usize,
    pub strict_gs: bool,
    pub dump_trajectories: bool,
    pub arch: ArchConfig,
    pub ppo: PpoParams,
    pub sac: SacParams,
}

impl ExperimentConfig {
    /// Published defaults for a suite.
    pub fn defaults_for(suite: &str) -> Result<Self, ExpError> {
        let probe = ScMdpSuite::make(suite, 0)?;
        let (algorithm, arch, eval_episodes, steps_per_epoch, total_steps) = match probe.kind {
            SuiteKind::Grid => (
                Algorithm::Mtppo,
                ArchConfig {
                    conv_channels: vec![16, 32, 64],
                    conv_kernel: 2,
                    conv_stride: 1,
                    dense_units: vec![],
                    head_hidden: vec![128],
                    combine_activation: "tanh".into(),
                },
                16usize,
                2000usize,
                // 100 epochs of 2000 ticks across every task env
                (100 * 2000 * probe.n_tasks()) as u64,
            ),
            SuiteKind::Point => (
                Algorithm::Mtsac,
                ArchConfig {
                    conv_channels: vec![],
                    conv_kernel: 2,
                    conv_stride: 1,
                    dense_units: vec![400, 400, 400],
                    head_hidden: vec![],
                    combine_activation: "linear".into(),
                },
                10usize,
                100_000usize,
                (20u64 * 100_000) * probe.n_tasks() as u64,
            ),
        };
        let k = match suite {
            "grid_mt3" => 2,
            "grid_mt5" => 3,
            "grid_mt7" => 4,
            "point_mt4" => 4,
            "point_mt10" => 6,
            _ => 2,
        };
        Ok(Self {
            suite: suite.to_string(),
            algorithm,
            representation: ReprChoice::Moore,
            head_mode: HeadChoice::Multi,
            k,
            pcgrad: false,
            share_experts: false,
            expert_permutation: None,
            transfer_source: None,
            seeds: vec![0, 1, 2, 3, 4],
            total_steps,
            steps_per_epoch,
            eval_episodes,
            strict_gs: false,
            dump_trajectories: false,
            arch,
            ppo: PpoParams::default(),
            sac: SacParams::default(),
        })
    }

    pub fn from_json(json: &str) -> Result<Self, ExpError> {
        let cfg: Self =
            serde_json::from_str(json).map_err(|e| ExpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        let suite = ScMdpSuite::make(&self.suite, 0)?;
        match (self.algorithm, suite.kind) {
            (Algorithm::Mtppo, SuiteKind::Grid) | (Algorithm::Mtsac, SuiteKind::Point) => {}
            (a, k) => {
                return Err(ExpError::Config(format!(
                    "algorithm {a:?} does not match suite kind {k:?}"
                )))
            }
        }
        if self.k == 0 {
            return Err(ExpError::Config("k must be at least 1".into()));
        }
        let d = self.representation_dim(&suite)?;
        if self.k > d {
            return Err(ExpError::Config(format!(
                "k={} exceeds representation dim d={d}",
                self.k
            )));
        }
        if let Some(p) = &self.expert_permutation {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..self.k).collect::<Vec<_>>() {
                return Err(ExpError::Config(format!(
                    "expert_permutation {p:?} is not a permutation of 0..{}",
                    self.k
                )));
            }
        }
        if self.transfer_source.is_some() && self.head_mode != HeadChoice::Multi {
            return Err(ExpError::Config(
                "transfer runs require the multi-head architecture".into(),
            ));
        }
        if self.share_experts && self.algorithm == Algorithm::Mtsac {
            return Err(ExpError::Config(
                "share_experts is only supported by the on-policy trainer".into(),
            ));
        }
        match self.arch.combine_activation.as_str() {
            "tanh" | "linear" => {}
            other => {
                return Err(ExpError::Config(format!(
                    "unknown combine_activation {other:?}"
                )))
            }
        }
        if self.seeds.is_empty() {
            return Err(ExpError::Config("seeds list is empty".into()));
        }
        Ok(())
    }

    /// Representation dimension d implied by the architecture.
    pub fn representation_dim(&self, suite: &ScMdpSuite) -> Result<usize, ExpError> {
        match suite.kind {
            SuiteKind::Grid => {
                if self.arch.conv_channels.is_empty() {
                    return Err(ExpError::Config(
                        "grid suites need at least one conv layer".into(),
                    ));
                }
                let shape = suite.obs_shape();
                let (mut h, mut w) = (shape[1], shape[2]);
                for _ in &self.arch.conv_channels {
                    if self.arch.conv_kernel > h || self.arch.conv_kernel > w {
                        return Err(ExpError::Config(
                            "conv stack shrinks the observation below the kernel".into(),
                        ));
                    }
                    h = (h - self.arch.conv_kernel) / self.arch.conv_stride + 1;
                    w = (w - self.arch.conv_kernel) / self.arch.conv_stride + 1;
                }
                Ok(self.arch.conv_channels.last().unwrap() * h * w)
            }
            SuiteKind::Point => self
                .arch
                .dense_units
                .last()
                .copied()
                .ok_or_else(|| ExpError::Config("point suites need dense expert layers".into())),
        }
    }
}

/// Applies `key=value` overrides with dotted paths into the JSON form.
/// Values parse as JSON first, falling back to bare strings.
pub fn apply_overrides(
    cfg: &ExperimentConfig,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, ExpError> {
    let mut value: serde_json::Value =
        serde_json::from_str(&cfg.to_json()).expect("config round-trips");
    fn descend(
        value: &mut serde_json::Value,
        parts: &[&str],
        path: &str,
        parsed: &serde_json::Value,
    ) -> Result<(), ExpError> {
        let obj = value.as_object_mut().ok_or_else(|| {
            ExpError::Config(format!("override path {path} descends into a non-object"))
        })?;
        let head = parts[0];
        if !obj.contains_key(head) {
            return Err(ExpError::Config(format!(
                "unknown config key {head:?} in override {path}"
            )));
        }
        if parts.len() == 1 {
            obj.insert(head.to_string(), parsed.clone());
            Ok(())
        } else {
            descend(obj.get_mut(head).unwrap(), &parts[1..], path, parsed)
        }
    }
    for (path, raw) in overrides {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let parts: Vec<&str> = path.split('.').collect();
        descend(&mut value, &parts, path, &parsed)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| ExpError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
