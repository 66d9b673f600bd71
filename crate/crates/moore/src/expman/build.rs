//! Builds agents from an experiment config. Construction order is fixed,
//! so identical (config, seed) pairs produce identical parameters and
//! identically ordered parameter lists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;
use std::rc::Rc;

use crate::envs::{ActionSpace, ScMdpSuite, SuiteKind};
use crate::mixture::{
    Actor, CombineActivation, Critic, ExpertStack, GsMode, HeadMode, MixtureNet, OutputHead,
    Representation, TaskEncoder,
};
use crate::numkit::Tensor;
use crate::rl::{PpoAgent, SacAgent, TemperatureBank};

use super::config::{ExperimentConfig, HeadChoice, ReprChoice};
use super::ExpError;

pub fn mix_seed(seed: u64, domain: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in domain.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
        h ^= h >> 31;
    }
    h
}

fn representation(cfg: &ExperimentConfig) -> Representation {
    match cfg.representation {
        ReprChoice::Moore => Representation::Moore,
        ReprChoice::Moe => Representation::Moe,
        ReprChoice::CosineSim => Representation::CosineSim,
    }
}

fn combine(cfg: &ExperimentConfig) -> CombineActivation {
    if cfg.arch.combine_activation == "tanh" {
        CombineActivation::Tanh
    } else {
        CombineActivation::Linear
    }
}

fn head_mode(cfg: &ExperimentConfig) -> HeadMode {
    match cfg.head_mode {
        HeadChoice::Multi => HeadMode::Multi,
        HeadChoice::Single => HeadMode::Single,
    }
}

fn expert_stack(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    in_dim_override: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertStack, ExpError> {
    match suite.kind {
        SuiteKind::Grid => {
            let shape = suite.obs_shape();
            ExpertStack::conv(
                cfg.k,
                (shape[0], shape[1], shape[2]),
                &cfg.arch.conv_channels,
                cfg.arch.conv_kernel,
                cfg.arch.conv_stride,
                rng,
            )
            .map_err(|e| ExpError::Config(e.to_string()))
        }
        SuiteKind::Point => {
            let mut dims = vec![in_dim_override.unwrap_or(suite.obs_shape()[0])];
            dims.extend_from_slice(&cfg.arch.dense_units);
            ExpertStack::dense(cfg.k, &dims, rng).map_err(|e| ExpError::Config(e.to_string()))
        }
    }
}

fn mixture_net(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    stack: ExpertStack,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> MixtureNet {
    let d = stack.d;
    let n_ctx = suite.n_tasks();
    MixtureNet {
        stack,
        task_encoder: TaskEncoder::init(n_ctx, cfg.k, rng),
        head: OutputHead::init(head_mode(cfg), n_ctx, d, &cfg.arch.head_hidden, out_dim, rng),
        representation: representation(cfg),
        combine: combine(cfg),
        gs_eps: 1e-8,
        gs_mode: if cfg.strict_gs {
            GsMode::Strict
        } else {
            GsMode::Training
        },
        permutation: cfg.expert_permutation.clone(),
        degeneracies: Rc::new(Cell::new(0)),
    }
}

pub struct PpoNets {
    pub actor: Actor,
    pub critic: Critic,
}

pub fn build_ppo_nets(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    seed: u64,
) -> Result<PpoNets, ExpError> {
    let ActionSpace::Discrete(n_actions) = suite.action_space() else {
        return Err(ExpError::Config(
            "the on-policy trainer needs a discrete action space".into(),
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "params"));
    let actor_stack = expert_stack(cfg, suite, None, &mut rng)?;
    let actor_net = mixture_net(cfg, suite, actor_stack, n_actions, &mut rng);
    let critic_stack = if cfg.share_experts {
        // tensor handles are shared: both nets train one stack
        actor_net.stack.clone()
    } else {
        expert_stack(cfg, suite, None, &mut rng)?
    };
    let critic_net = mixture_net(cfg, suite, critic_stack, 1, &mut rng);
    Ok(PpoNets {
        actor: Actor {
            net: actor_net,
            gaussian_dim: None,
        },
        critic: Critic {
            net: critic_net,
            q_function: false,
        },
    })
}

pub fn assemble_ppo(
    nets: PpoNets,
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    seed: u64,
) -> Result<PpoAgent, ExpError> {
    let ActionSpace::Discrete(n_actions) = suite.action_space() else {
        unreachable!("validated upstream");
    };
    Ok(PpoAgent::new(
        nets.actor,
        nets.critic,
        cfg.ppo.to_rl(),
        cfg.pcgrad,
        n_actions,
        suite.obs_shape(),
        mix_seed(seed, "ppo-update"),
    ))
}

pub fn build_sac(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    seed: u64,
) -> Result<SacAgent, ExpError> {
    let ActionSpace::Continuous(adim) = suite.action_space() else {
        return Err(ExpError::Config(
            "the off-policy trainer needs a continuous action space".into(),
        ));
    };
    let obs_dim = suite.obs_shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "params"));
    let actor_stack = expert_stack(cfg, suite, None, &mut rng)?;
    let actor = Actor {
        net: mixture_net(cfg, suite, actor_stack, 2 * adim, &mut rng),
        gaussian_dim: Some(adim),
    };
    let critic = |rng: &mut ChaCha8Rng| -> Result<Critic, ExpError> {
        let stack = expert_stack(cfg, suite, Some(obs_dim + adim), rng)?;
        Ok(Critic {
            net: mixture_net(cfg, suite, stack, 1, rng),
            q_function: true,
        })
    };
    let c1 = critic(&mut rng)?;
    let c2 = critic(&mut rng)?;
    let t1 = critic(&mut rng)?;
    let t2 = critic(&mut rng)?;
    let temps = TemperatureBank::new(suite.n_tasks(), adim);
    Ok(SacAgent::new(
        actor,
        c1,
        c2,
        t1,
        t2,
        temps,
        cfg.sac.to_rl(),
        adim,
        obs_dim,
        mix_seed(seed, "sac-update"),
    ))
}

pub fn named_params_ppo(agent: &PpoAgent) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    agent.actor.net.named_params("actor", &mut out);
    agent.critic.net.named_params("critic", &mut out);
    out
}

pub fn named_params_sac(agent: &SacAgent) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    agent.actor.net.named_params("actor", &mut out);
    agent.critic1.net.named_params("critic1", &mut out);
    agent.critic2.net.named_params("critic2", &mut out);
    agent.target1.net.named_params("target1", &mut out);
    agent.target2.net.named_params("target2", &mut out);
    for (i, a) in agent.temps.log_alphas.iter().enumerate() {
        out.push((format!("alpha.task{i}"), a.clone()));
    }
    out
}

/// CRC32 of the expert parameters, for transfer immutability checks.
pub fn expert_hash(net: &MixtureNet) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for p in net.expert_params() {
        for v in p.to_vec() {
            hasher.update(&v.to_le_bytes());
        }
    }
    hasher.finalize()
}
