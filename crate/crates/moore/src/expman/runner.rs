//! Training loops wiring suites, agents, metrics, and checkpoints: normal
//! runs, transfer runs with frozen experts, and the random-policy baseline.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, ActionSpace, Env, ScMdpSuite};
use crate::mixture::{stiefel_residual, Representation};
use crate::numkit::Tape;
use crate::rl::{
    cosine_reg_loss, freeze_experts, ppo_update, sac_update, PpoAgent, ReplayBuffer, RolloutBatch,
    RolloutStep, SacAgent, Transition,
};

use super::build::{
    assemble_ppo, build_ppo_nets, build_sac, expert_hash, mix_seed, named_params_ppo,
    named_params_sac,
};
use super::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, RngState, CHECKPOINT_VERSION,
};
use super::config::{Algorithm, ExperimentConfig, HeadChoice};
use super::metrics::{write_jsonl, LossRecord, MetricRecord};
use super::ExpError;

/// Optional evaluation-driven stopping rule for budgeted sanity gates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EarlyStop {
    None,
    AvgReturnAtLeast(f64),
    AvgSuccessAtLeast(f64),
    /// Return averaged over the tasks being trained reaches `factor` times
    /// the random-policy baseline on the same tasks.
    ActiveReturnFactorOfBaseline(f64),
    /// Grid suites: evaluation return reaches `fraction` of the mean
    /// search-optimal return over the very same evaluation episodes.
    OptimalReturnFraction(f64),
}

fn active_mean(values: &[f64], active: &[usize]) -> f64 {
    if active.is_empty() {
        return 0.0;
    }
    active.iter().map(|&t| values[t]).sum::<f64>() / active.len() as f64
}

impl EarlyStop {
    fn met(
        &self,
        rec: &MetricRecord,
        active: &[usize],
        baseline: &BaselineReport,
        suite: &ScMdpSuite,
        eval_episodes: usize,
        epoch: u64,
    ) -> Result<bool, ExpError> {
        // stopping rules describe trained behavior; the step-0 evaluation
        // never counts
        if epoch == 0 {
            return Ok(false);
        }
        Ok(match *self {
            EarlyStop::None => false,
            EarlyStop::AvgReturnAtLeast(x) => rec.avg_return >= x,
            EarlyStop::AvgSuccessAtLeast(x) => rec.avg_success >= x,
            EarlyStop::ActiveReturnFactorOfBaseline(f) => {
                let got = active_mean(&rec.per_task_return, active);
                let base = active_mean(&baseline.per_task_return, active);
                // strict: a zero baseline still demands positive return
                got > f * base && got > 0.0
            }
            EarlyStop::OptimalReturnFraction(frac) => {
                let mut total = 0.0;
                let mut count = 0usize;
                for &task in active {
                    for ep in 0..eval_episodes {
                        total += suite.optimal_return(task, eval_episode_seed(epoch, task, ep))?;
                        count += 1;
                    }
                }
                let opt_mean = total / count.max(1) as f64;
                active_mean(&rec.per_task_return, active) >= frac * opt_mean
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub per_task_return: Vec<f64>,
    pub per_task_success: Vec<f64>,
    pub avg_return: f64,
    pub avg_success: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_id: String,
    pub seed: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub records: Vec<MetricRecord>,
    pub baseline: BaselineReport,
    pub expert_hash_start: u32,
    pub expert_hash_end: u32,
    /// Environment steps actually consumed (early stop may shorten runs).
    pub steps_taken: u64,
    /// Tasks that were collected and trained (the novel set for transfers).
    pub active_tasks: Vec<usize>,
    /// True when an early-stop rule fired at some evaluation.
    pub stopped_early: bool,
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    let repr = match cfg.representation {
        super::config::ReprChoice::Moore => "moore",
        super::config::ReprChoice::Moe => "moe",
        super::config::ReprChoice::CosineSim => "cosine_sim",
    };
    let head = match cfg.head_mode {
        HeadChoice::Multi => "multi",
        HeadChoice::Single => "single",
    };
    let mut id = format!("{}-{:?}-{repr}-{head}-k{}", cfg.suite, cfg.algorithm, cfg.k);
    id = id.to_lowercase();
    if cfg.pcgrad {
        id.push_str("-pcgrad");
    }
    if let Some(p) = &cfg.expert_permutation {
        id.push_str(&format!("-perm{}", p.iter().map(|i| i.to_string()).collect::<String>()));
    }
    if cfg.transfer_source.is_some() {
        id.push_str("-transfer");
    }
    format!("{id}-seed{seed}")
}

fn eval_episode_seed(epoch: u64, task: usize, ep: usize) -> u64 {
    (1u64 << 62) | (epoch << 24) | ((task as u64) << 16) | ep as u64
}

/// Runs one training configuration for one seed, writing metrics and the
/// final checkpoint under `out_dir`.
pub fn run_training(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    early_stop: EarlyStop,
) -> Result<RunArtifacts, ExpError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| ExpError::Io(e.to_string()))?;
    match cfg.algorithm {
        Algorithm::Mtppo => run_ppo(cfg, seed, out_dir, early_stop),
        Algorithm::Mtsac => run_sac(cfg, seed, out_dir, early_stop),
    }
}

/// Transfer run: the config must carry a source checkpoint whose suite is
/// contained in the target suite; experts load frozen and only the novel
/// tasks are collected and trained.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    early_stop: EarlyStop,
) -> Result<RunArtifacts, ExpError> {
    if cfg.transfer_source.is_none() {
        return Err(ExpError::Config(
            "run_transfer needs transfer_source in the config".into(),
        ));
    }
    run_training(cfg, seed, out_dir, early_stop)
}

// ---------------------------------------------------------------- PPO ----

fn run_ppo(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    early_stop: EarlyStop,
) -> Result<RunArtifacts, ExpError> {
    let suite = ScMdpSuite::make(&cfg.suite, seed)?;
    let mut nets = build_ppo_nets(cfg, &suite, seed)?;

    // Transfer: load the source experts (and the base tasks' heads and
    // encoder rows), then freeze the stacks.
    let mut active_tasks: Vec<usize> = (0..suite.n_tasks()).collect();
    if let Some(src_path) = &cfg.transfer_source {
        let ck = load_checkpoint(Path::new(src_path))?;
        let src_cfg = ExperimentConfig::from_json(&ck.config_json)?;
        let src_suite = ScMdpSuite::make(&src_cfg.suite, 0)?;
        let Some(indices) = src_suite.indices_within(&suite) else {
            return Err(ExpError::Config(format!(
                "transfer source suite {} is not contained in {}",
                src_cfg.suite, cfg.suite
            )));
        };
        if src_cfg.head_mode != HeadChoice::Multi || cfg.head_mode != HeadChoice::Multi {
            return Err(ExpError::Config(
                "transfer requires multi-head source and target".into(),
            ));
        }
        if src_cfg.k != cfg.k {
            return Err(ExpError::Config(format!(
                "transfer expert count mismatch: source k={}, target k={}",
                src_cfg.k, cfg.k
            )));
        }
        load_transferred(&ck, &mut nets, &indices)?;
        freeze_experts(&nets.actor.net);
        freeze_experts(&nets.critic.net);
        active_tasks.retain(|t| !indices.contains(t));
        if active_tasks.is_empty() {
            return Err(ExpError::Config(
                "transfer target adds no novel tasks".into(),
            ));
        }
    }

    let mut agent = assemble_ppo(nets, cfg, &suite, seed)?;
    let hash_start = expert_hash(&agent.actor.net);
    let id = run_id(cfg, seed);
    reset_dump(cfg, out_dir, &id)?;
    let mut collect_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "collect"));

    let baseline = random_baseline_ppo(cfg, &suite, seed)?;

    let n = suite.n_tasks();
    let mut envs: Vec<Env> = (0..n)
        .map(|t| suite.make_env(t))
        .collect::<Result<_, _>>()?;
    let mut episode_counter: Vec<u64> = vec![0; n];
    let mut obs: Vec<Vec<f64>> = envs
        .iter_mut()
        .enumerate()
        .map(|(t, e)| e.reset(episode_counter[t]))
        .collect();

    let mut records = Vec::new();
    let mut total_steps: u64 = 0;
    let mut epoch: u64 = 0;
    let rec0 = evaluate_ppo(cfg, &suite, &agent, &id, seed, 0, 0, out_dir)?;
    let mut stopped_early =
        early_stop.met(&rec0, &active_tasks, &baseline, &suite, cfg.eval_episodes, 0)?;
    records.push(rec0);

    if !stopped_early {
        'outer: while total_steps < cfg.total_steps {
            epoch += 1;
            let mut rollout = RolloutBatch::new(n);
            let mut pending: Vec<Option<usize>> = vec![None; n];
            for _tick in 0..cfg.steps_per_epoch {
                let ctxs: Vec<usize> = active_tasks.clone();
                let batch_obs: Vec<Vec<f64>> =
                    active_tasks.iter().map(|&t| obs[t].clone()).collect();
                let (actions, logps) = agent.act(&batch_obs, &ctxs, &mut collect_rng)?;
                let values = agent.values(&batch_obs, &ctxs)?;
                for (slot, &task) in active_tasks.iter().enumerate() {
                    if let Some(idx) = pending[task].take() {
                        rollout.per_task[task][idx].next_value = values[slot];
                    }
                    let outcome = envs[task].step(&Action::Discrete(actions[slot]))?;
                    total_steps += 1;
                    rollout.per_task[task].push(RolloutStep {
                        obs: std::mem::take(&mut obs[task]),
                        action: Action::Discrete(actions[slot]),
                        ctx: task,
                        reward: outcome.reward,
                        absorbing: outcome.absorbing,
                        last: outcome.last,
                        logp: logps[slot],
                        value: values[slot],
                        next_value: 0.0,
                    });
                    let idx = rollout.per_task[task].len() - 1;
                    if outcome.last {
                        if !outcome.absorbing {
                            let v = agent.values(std::slice::from_ref(&outcome.obs), &[task])?[0];
                            rollout.per_task[task][idx].next_value = v;
                        }
                        episode_counter[task] += 1;
                        obs[task] = envs[task].reset(episode_counter[task]);
                    } else {
                        obs[task] = outcome.obs;
                        pending[task] = Some(idx);
                    }
                }
                if total_steps >= cfg.total_steps {
                    break;
                }
            }
            // bootstrap unfinished episodes at the epoch boundary
            for &task in &active_tasks {
                if let Some(idx) = pending[task].take() {
                    let v = agent.values(std::slice::from_ref(&obs[task]), &[task])?[0];
                    rollout.per_task[task][idx].next_value = v;
                }
            }
            let report = ppo_update(&mut agent, &rollout).map_err(ExpError::Rl)?;
            let mut rec =
                evaluate_ppo(cfg, &suite, &agent, &id, seed, total_steps, epoch, out_dir)?;
            rec.losses = LossRecord {
                policy: report.policy_loss,
                critic: report.critic_loss,
                entropy: report.entropy,
                alpha: 0.0,
            };
            let stop =
                early_stop.met(&rec, &active_tasks, &baseline, &suite, cfg.eval_episodes, epoch)?;
            records.push(rec);
            if stop {
                stopped_early = true;
                break 'outer;
            }
        }
    }

    let metrics_path = out_dir.join(format!("{id}.metrics.jsonl"));
    write_jsonl(&metrics_path, &records)?;
    let checkpoint_path = out_dir.join(format!("{id}.ckpt.moor"));
    let (t_pol, slots_pol) = {
        let (p, _) = agent.optimizers();
        p.export_state()
    };
    let (t_cri, slots_cri) = {
        let (_, c) = agent.optimizers();
        c.export_state()
    };
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_json: cfg.to_json(),
        step: total_steps,
        rngs: vec![("collect".into(), RngState::capture(&collect_rng))],
        tensors: named_params_ppo(&agent)
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.to_vec()))
            .collect(),
        optimizers: vec![
            OptimizerState {
                name: "policy".into(),
                t: t_pol,
                slots: slots_pol,
            },
            OptimizerState {
                name: "critic".into(),
                t: t_cri,
                slots: slots_cri,
            },
        ],
    };
    save_checkpoint(&ck, &checkpoint_path)?;

    Ok(RunArtifacts {
        run_id: id,
        seed,
        metrics_path,
        checkpoint_path,
        records,
        baseline,
        expert_hash_start: hash_start,
        expert_hash_end: expert_hash(&agent.actor.net),
        steps_taken: total_steps,
        active_tasks,
        stopped_early,
    })
}

fn load_transferred(
    ck: &Checkpoint,
    nets: &mut super::build::PpoNets,
    base_indices: &[usize],
) -> Result<(), ExpError> {
    // experts transfer wholesale
    let mut expert_names = Vec::new();
    nets.actor.net.stack.named_params("actor.experts", &mut expert_names);
    nets.critic.net.stack.named_params("critic.experts", &mut expert_names);
    ck.load_into(&expert_names)?;

    // base tasks reuse their heads and encoder rows; novel entries keep
    // their fresh initialization
    for (net, prefix) in [
        (&nets.actor.net, "actor"),
        (&nets.critic.net, "critic"),
    ] {
        for (src_idx, &dst_idx) in base_indices.iter().enumerate() {
            let mut head_names = Vec::new();
            net.head.nets[dst_idx].named_params(
                &format!("{prefix}.head.task{src_idx}"),
                &mut head_names,
            );
            ck.load_into(&head_names)?;
            // encoder row for the base task
            let Some((shape, data)) = ck.tensor(&format!("{prefix}.task_encoder.w")) else {
                return Err(ExpError::Checkpoint(
                    "source checkpoint lacks a task encoder".into(),
                ));
            };
            let k = shape[1];
            let row = &data[src_idx * k..(src_idx + 1) * k];
            net.task_encoder.weight.update_data(|w| {
                w[dst_idx * k..(dst_idx + 1) * k].copy_from_slice(row);
            });
        }
    }
    Ok(())
}

fn random_baseline_ppo(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    seed: u64,
) -> Result<BaselineReport, ExpError> {
    let ActionSpace::Discrete(n_actions) = suite.action_space() else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "baseline"));
    let n = suite.n_tasks();
    let mut per_task_return = vec![0.0; n];
    let mut per_task_success = vec![0.0; n];
    for task in 0..n {
        for ep in 0..cfg.eval_episodes {
            let mut env = suite.make_env(task)?;
            env.reset(eval_episode_seed(0, task, ep));
            let mut ret = 0.0;
            let mut success = false;
            loop {
                let a = rng.random_range(0..n_actions);
                let out = env.step(&Action::Discrete(a))?;
                ret += out.reward;
                if out.absorbing && out.reward > 0.0 {
                    success = true;
                }
                if out.last {
                    break;
                }
            }
            per_task_return[task] += ret;
            per_task_success[task] += f64::from(success);
        }
        per_task_return[task] /= cfg.eval_episodes as f64;
        per_task_success[task] /= cfg.eval_episodes as f64;
    }
    Ok(BaselineReport {
        avg_return: per_task_return.iter().sum::<f64>() / n as f64,
        avg_success: per_task_success.iter().sum::<f64>() / n as f64,
        per_task_return,
        per_task_success,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_ppo(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    agent: &PpoAgent,
    run_id: &str,
    seed: u64,
    step: u64,
    epoch: u64,
    out_dir: &Path,
) -> Result<MetricRecord, ExpError> {
    let n = suite.n_tasks();
    let mut per_task_return = vec![0.0; n];
    let mut per_task_success = vec![0.0; n];
    let mut probe_states: Vec<Vec<f64>> = Vec::new();
    let mut probe_ctxs: Vec<usize> = Vec::new();
    let mut dump = DumpFile::open(cfg, out_dir, run_id)?;
    for task in 0..n {
        for ep in 0..cfg.eval_episodes {
            let mut env = suite.make_env(task)?;
            let mut o = env.reset(eval_episode_seed(epoch, task, ep));
            let mut ret = 0.0;
            let mut success = false;
            let mut t = 0u64;
            loop {
                if ep == 0 && probe_states.len() < 8 * n {
                    probe_states.push(o.clone());
                    probe_ctxs.push(task);
                }
                let a = agent.act_mode(&[o.clone()], &[task])?[0];
                let out = env.step(&Action::Discrete(a))?;
                dump.record(t, task, &o, &format!("{a}"), out.reward, out.absorbing, out.last)?;
                ret += out.reward;
                if out.absorbing && out.reward > 0.0 {
                    success = true;
                }
                t += 1;
                if out.last {
                    break;
                }
                o = out.obs;
            }
            per_task_return[task] += ret;
            per_task_success[task] += f64::from(success);
        }
        per_task_return[task] /= cfg.eval_episodes as f64;
        per_task_success[task] /= cfg.eval_episodes as f64;
    }
    let (gs_residual_max, reg_value) =
        representation_diagnostics(agent, &probe_states, &probe_ctxs)?;
    Ok(MetricRecord {
        run_id: run_id.to_string(),
        seed,
        step,
        per_task_return,
        per_task_success,
        avg_return: 0.0,
        avg_success: 0.0,
        losses: LossRecord::default(),
        gs_degeneracies: agent.actor.net.degeneracies.get()
            + agent.critic.net.degeneracies.get(),
        gs_residual_max,
        reg_value,
    }
    .averaged())
}

fn representation_diagnostics(
    agent: &PpoAgent,
    states: &[Vec<f64>],
    ctxs: &[usize],
) -> Result<(f64, Option<f64>), ExpError> {
    if states.is_empty() {
        return Ok((0.0, None));
    }
    let tape = Tape::inference();
    let obs_t = agent.batch_tensor(states);
    let trace = agent
        .actor
        .net
        .forward_traced(&tape, &obs_t, ctxs)
        .map_err(|e| ExpError::Rl(e.into()))?;
    let residual = trace
        .basis
        .as_ref()
        .map(stiefel_residual)
        .unwrap_or(0.0);
    let reg = if matches!(agent.actor.net.representation, Representation::CosineSim) {
        Some(
            cosine_reg_loss(&tape, &trace.reps)
                .map_err(|e| ExpError::Rl(e.into()))?
                .value(),
        )
    } else {
        None
    };
    Ok((residual, reg))
}

// ---------------------------------------------------------------- SAC ----

fn run_sac(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    early_stop: EarlyStop,
) -> Result<RunArtifacts, ExpError> {
    let suite = ScMdpSuite::make(&cfg.suite, seed)?;
    if cfg.transfer_source.is_some() {
        return Err(ExpError::Config(
            "transfer runs use the on-policy trainer".into(),
        ));
    }
    let mut agent = build_sac(cfg, &suite, seed)?;
    let hash_start = expert_hash(&agent.actor.net);
    let id = run_id(cfg, seed);
    reset_dump(cfg, out_dir, &id)?;
    let mut collect_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "collect"));
    let baseline = random_baseline_sac(cfg, &suite, seed)?;

    let n = suite.n_tasks();
    let mut buffer = ReplayBuffer::new(n, cfg.sac.buffer_capacity);
    let mut envs: Vec<Env> = (0..n)
        .map(|t| suite.make_env(t))
        .collect::<Result<_, _>>()?;
    let mut episode_counter: Vec<u64> = vec![0; n];
    let mut obs: Vec<Vec<f64>> = envs
        .iter_mut()
        .enumerate()
        .map(|(t, e)| e.reset(episode_counter[t]))
        .collect();

    let mut records = Vec::new();
    let mut total_steps: u64 = 0;
    let mut epoch: u64 = 0;
    let all_tasks: Vec<usize> = (0..n).collect();
    let rec0 = evaluate_sac(cfg, &suite, &agent, &id, seed, 0, 0, out_dir)?;
    let mut stop = early_stop.met(&rec0, &all_tasks, &baseline, &suite, cfg.eval_episodes, 0)?;
    let mut stopped_early = stop;
    records.push(rec0);

    let mut loss_accum = LossRecord::default();
    let mut loss_count = 0u64;
    let mut tick_in_epoch = 0usize;
    while !stop && total_steps < cfg.total_steps {
        // one step in every task environment
        for task in 0..n {
            let warmup = buffer.len(task) < cfg.sac.exploration_steps;
            let a = agent
                .act(&obs[task], task, warmup, &mut collect_rng)
                .map_err(ExpError::Rl)?;
            let outcome = envs[task].step(&Action::Continuous(a.clone()))?;
            total_steps += 1;
            buffer
                .push(Transition {
                    task,
                    obs: std::mem::take(&mut obs[task]),
                    action: Action::Continuous(a),
                    reward: outcome.reward,
                    next_obs: outcome.obs.clone(),
                    absorbing: outcome.absorbing,
                    last: outcome.last,
                })
                .map_err(ExpError::Rl)?;
            if outcome.last {
                episode_counter[task] += 1;
                obs[task] = envs[task].reset(episode_counter[task]);
            } else {
                obs[task] = outcome.obs;
            }
        }
        tick_in_epoch += 1;
        if buffer.min_len() >= cfg.sac.exploration_steps {
            for _ in 0..cfg.sac.train_frequency {
                let report = sac_update(&mut agent, &mut buffer).map_err(ExpError::Rl)?;
                loss_accum.policy += report.actor_loss;
                loss_accum.critic += report.critic_loss;
                loss_accum.alpha += report.alpha_loss;
                loss_accum.entropy += -report.mean_logp;
                loss_count += 1;
            }
        }
        if tick_in_epoch >= cfg.steps_per_epoch || total_steps >= cfg.total_steps {
            epoch += 1;
            tick_in_epoch = 0;
            let mut rec =
                evaluate_sac(cfg, &suite, &agent, &id, seed, total_steps, epoch, out_dir)?;
            if loss_count > 0 {
                rec.losses = LossRecord {
                    policy: loss_accum.policy / loss_count as f64,
                    critic: loss_accum.critic / loss_count as f64,
                    entropy: loss_accum.entropy / loss_count as f64,
                    alpha: loss_accum.alpha / loss_count as f64,
                };
            }
            loss_accum = LossRecord::default();
            loss_count = 0;
            stop = early_stop.met(&rec, &all_tasks, &baseline, &suite, cfg.eval_episodes, epoch)?;
            stopped_early |= stop;
            records.push(rec);
        }
    }

    let metrics_path = out_dir.join(format!("{id}.metrics.jsonl"));
    write_jsonl(&metrics_path, &records)?;
    let checkpoint_path = out_dir.join(format!("{id}.ckpt.moor"));
    let mut optimizers = Vec::new();
    {
        let (a, c, al) = agent.optimizers();
        for (name, opt) in [("actor", a), ("critic", c), ("alpha", al)] {
            let (t, slots) = {
                let o: &mut crate::numkit::Adam = opt;
                o.export_state()
            };
            optimizers.push(OptimizerState {
                name: name.into(),
                t,
                slots,
            });
        }
    }
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_json: cfg.to_json(),
        step: total_steps,
        rngs: vec![("collect".into(), RngState::capture(&collect_rng))],
        tensors: named_params_sac(&agent)
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.to_vec()))
            .collect(),
        optimizers,
    };
    save_checkpoint(&ck, &checkpoint_path)?;

    Ok(RunArtifacts {
        run_id: id,
        seed,
        metrics_path,
        checkpoint_path,
        records,
        baseline,
        expert_hash_start: hash_start,
        expert_hash_end: expert_hash(&agent.actor.net),
        steps_taken: total_steps,
        active_tasks: all_tasks,
        stopped_early,
    })
}

fn random_baseline_sac(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    seed: u64,
) -> Result<BaselineReport, ExpError> {
    let ActionSpace::Continuous(adim) = suite.action_space() else {
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "baseline"));
    let n = suite.n_tasks();
    let mut per_task_return = vec![0.0; n];
    let mut per_task_success = vec![0.0; n];
    for task in 0..n {
        for ep in 0..cfg.eval_episodes {
            let mut env = suite.make_env(task)?;
            env.reset(eval_episode_seed(0, task, ep));
            let mut ret = 0.0;
            let mut success = false;
            loop {
                let a: Vec<f64> = (0..adim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let out = env.step(&Action::Continuous(a))?;
                ret += out.reward;
                if out.absorbing {
                    success = true;
                }
                if out.last {
                    break;
                }
            }
            per_task_return[task] += ret;
            per_task_success[task] += f64::from(success);
        }
        per_task_return[task] /= cfg.eval_episodes as f64;
        per_task_success[task] /= cfg.eval_episodes as f64;
    }
    Ok(BaselineReport {
        avg_return: per_task_return.iter().sum::<f64>() / n as f64,
        avg_success: per_task_success.iter().sum::<f64>() / n as f64,
        per_task_return,
        per_task_success,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_sac(
    cfg: &ExperimentConfig,
    suite: &ScMdpSuite,
    agent: &SacAgent,
    run_id: &str,
    seed: u64,
    step: u64,
    epoch: u64,
    out_dir: &Path,
) -> Result<MetricRecord, ExpError> {
    let n = suite.n_tasks();
    let mut per_task_return = vec![0.0; n];
    let mut per_task_success = vec![0.0; n];
    let mut probe_states: Vec<Vec<f64>> = Vec::new();
    let mut probe_ctxs: Vec<usize> = Vec::new();
    let mut dump = DumpFile::open(cfg, out_dir, run_id)?;
    for task in 0..n {
        for ep in 0..cfg.eval_episodes {
            let mut env = suite.make_env(task)?;
            let mut o = env.reset(eval_episode_seed(epoch, task, ep));
            let mut ret = 0.0;
            let mut success = false;
            let mut t = 0u64;
            loop {
                if ep == 0 && probe_states.len() < 8 * n {
                    probe_states.push(o.clone());
                    probe_ctxs.push(task);
                }
                let a = agent.act_mode(&o, task).map_err(ExpError::Rl)?;
                let out = env.step(&Action::Continuous(a.clone()))?;
                dump.record(
                    t,
                    task,
                    &o,
                    &format!("{a:?}"),
                    out.reward,
                    out.absorbing,
                    out.last,
                )?;
                ret += out.reward;
                if out.absorbing {
                    success = true;
                }
                t += 1;
                if out.last {
                    break;
                }
                o = out.obs;
            }
            per_task_return[task] += ret;
            per_task_success[task] += f64::from(success);
        }
        per_task_return[task] /= cfg.eval_episodes as f64;
        per_task_success[task] /= cfg.eval_episodes as f64;
    }
    // diagnostics share the actor pipeline with the PPO path
    let (gs_residual_max, reg_value) = {
        if probe_states.is_empty() {
            (0.0, None)
        } else {
            let tape = Tape::inference();
            let obs_t = crate::rl::ppo::batch_tensor(&suite.obs_shape(), &probe_states);
            let trace = agent
                .actor
                .net
                .forward_traced(&tape, &obs_t, &probe_ctxs)
                .map_err(|e| ExpError::Rl(e.into()))?;
            let residual = trace.basis.as_ref().map(stiefel_residual).unwrap_or(0.0);
            let reg = if matches!(agent.actor.net.representation, Representation::CosineSim) {
                Some(
                    cosine_reg_loss(&tape, &trace.reps)
                        .map_err(|e| ExpError::Rl(e.into()))?
                        .value(),
                )
            } else {
                None
            };
            (residual, reg)
        }
    };
    Ok(MetricRecord {
        run_id: run_id.to_string(),
        seed,
        step,
        per_task_return,
        per_task_success,
        avg_return: 0.0,
        avg_success: 0.0,
        losses: LossRecord::default(),
        gs_degeneracies: agent.actor.net.degeneracies.get()
            + agent.critic1.net.degeneracies.get()
            + agent.critic2.net.degeneracies.get(),
        gs_residual_max,
        reg_value,
    }
    .averaged())
}

// ------------------------------------------------------------- shared ----

fn reset_dump(cfg: &ExperimentConfig, out_dir: &Path, run_id: &str) -> Result<(), ExpError> {
    if cfg.dump_trajectories {
        let path = out_dir.join(format!("{run_id}.trajectories.jsonl"));
        if path.exists() {
            std::fs::remove_file(path).map_err(|e| ExpError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

struct DumpFile {
    file: Option<std::fs::File>,
}

impl DumpFile {
    fn open(cfg: &ExperimentConfig, out_dir: &Path, run_id: &str) -> Result<Self, ExpError> {
        if !cfg.dump_trajectories {
            return Ok(Self { file: None });
        }
        let path = out_dir.join(format!("{run_id}.trajectories.jsonl"));
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ExpError::Io(e.to_string()))?;
        Ok(Self { file: Some(file) })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        t: u64,
        c: usize,
        obs: &[f64],
        action: &str,
        reward: f64,
        absorbing: bool,
        last: bool,
    ) -> Result<(), ExpError> {
        let Some(f) = self.file.as_mut() else {
            return Ok(());
        };
        let mut hasher = crc32fast::Hasher::new();
        for v in obs {
            hasher.update(&v.to_le_bytes());
        }
        let line = serde_json::json!({
            "t": t,
            "c": c,
            "s_digest": format!("{:08x}", hasher.finalize()),
            "a": action,
            "r": reward,
            "absorbing": absorbing,
            "last": last,
        });
        writeln!(f, "{line}").map_err(|e| ExpError::Io(e.to_string()))
    }
}

/// Runs several (config, seed) cells on a bounded thread pool; results come
/// back in submission order.
pub fn run_many(
    jobs: Vec<(ExperimentConfig, u64, PathBuf, EarlyStop)>,
) -> Vec<Result<RunArtifacts, ExpError>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    let jobs: Vec<(usize, (ExperimentConfig, u64, PathBuf, EarlyStop))> =
        jobs.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(jobs);
    let mut results: Vec<Option<Result<RunArtifacts, ExpError>>> = Vec::new();
    {
        let n_jobs = queue.lock().unwrap().len();
        results.resize_with(n_jobs, || None);
    }
    let results = std::sync::Mutex::new(results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                let Some((idx, (cfg, seed, out, stop))) = job else {
                    break;
                };
                let res = run_training(&cfg, seed, &out, stop);
                results.lock().unwrap()[idx] = Some(res);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
