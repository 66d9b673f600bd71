//! Clipped-surrogate on-policy trainer. Losses are averaged over
//! transitions pooled from all tasks; optional gradient surgery de-conflicts
//! per-task gradients on the shared parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::Action;
use crate::mixture::{Actor, Critic, PolicyOutput};
use crate::numkit::{Adam, Tape, Tensor};

use super::gae::{compute_gae, standardize};
use super::pcgrad::pcgrad_project;
use super::rollout::RolloutBatch;
use super::RlError;

#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub policy_epochs: usize,
    pub policy_batch: usize,
    pub critic_epochs: usize,
    pub critic_batch: usize,
    pub lr_policy: f64,
    pub lr_critic: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
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

#[derive(Debug, Clone, Default)]
pub struct PpoReport {
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub per_task_policy: Vec<f64>,
    pub per_task_critic: Vec<f64>,
}

pub struct PpoAgent {
    pub actor: Actor,
    pub critic: Critic,
    pub cfg: PpoConfig,
    pub pcgrad: bool,
    pub n_actions: usize,
    obs_shape: Vec<usize>,
    opt_policy: Adam,
    opt_critic: Adam,
    update_rng: ChaCha8Rng,
}

impl PpoAgent {
    pub fn new(
        actor: Actor,
        critic: Critic,
        cfg: PpoConfig,
        pcgrad: bool,
        n_actions: usize,
        obs_shape: Vec<usize>,
        seed: u64,
    ) -> Self {
        let trainable = |ps: Vec<Tensor>| -> Vec<Tensor> {
            ps.into_iter().filter(|p| p.requires_grad()).collect()
        };
        let opt_policy = Adam::new(trainable(actor.net.all_params()), cfg.lr_policy);
        let opt_critic = Adam::new(trainable(critic.net.all_params()), cfg.lr_critic);
        Self {
            actor,
            critic,
            cfg,
            pcgrad,
            n_actions,
            obs_shape,
            opt_policy,
            opt_critic,
            update_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    /// Optimizer state accessors for checkpointing.
    pub fn optimizers(&mut self) -> (&mut Adam, &mut Adam) {
        (&mut self.opt_policy, &mut self.opt_critic)
    }

    pub fn batch_tensor(&self, obs: &[Vec<f64>]) -> Tensor {
        batch_tensor(&self.obs_shape, obs)
    }

    /// Sampled actions with their log-probabilities, on an inference tape.
    pub fn act(
        &self,
        obs: &[Vec<f64>],
        ctxs: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, Vec<f64>), RlError> {
        let tape = Tape::inference();
        let logits = self.logits(&tape, obs, ctxs)?;
        let ls = tape.log_softmax(&logits)?;
        let data = ls.to_vec();
        let n = self.n_actions;
        let mut actions = Vec::with_capacity(obs.len());
        let mut logps = Vec::with_capacity(obs.len());
        for r in 0..obs.len() {
            let row = &data[r * n..(r + 1) * n];
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut chosen = n - 1;
            for (a, lp) in row.iter().enumerate() {
                cum += lp.exp();
                if u < cum {
                    chosen = a;
                    break;
                }
            }
            actions.push(chosen);
            logps.push(row[chosen]);
        }
        Ok((actions, logps))
    }

    /// Mode (argmax) actions for deterministic evaluation.
    pub fn act_mode(&self, obs: &[Vec<f64>], ctxs: &[usize]) -> Result<Vec<usize>, RlError> {
        let tape = Tape::inference();
        let logits = self.logits(&tape, obs, ctxs)?;
        let data = logits.to_vec();
        let n = self.n_actions;
        Ok((0..obs.len())
            .map(|r| {
                let row = &data[r * n..(r + 1) * n];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    /// Log-probabilities of given actions under the current policy.
    pub fn log_prob(
        &self,
        obs: &[Vec<f64>],
        ctxs: &[usize],
        actions: &[usize],
    ) -> Result<Vec<f64>, RlError> {
        let tape = Tape::inference();
        let logits = self.logits(&tape, obs, ctxs)?;
        let ls = tape.log_softmax(&logits)?;
        Ok(tape.take_per_row(&ls, actions)?.to_vec())
    }

    pub fn values(&self, obs: &[Vec<f64>], ctxs: &[usize]) -> Result<Vec<f64>, RlError> {
        let tape = Tape::inference();
        let t = self.batch_tensor(obs);
        let v = self.critic.forward(&tape, &t, ctxs, None)?;
        Ok(v.to_vec())
    }

    fn logits(&self, tape: &Tape, obs: &[Vec<f64>], ctxs: &[usize]) -> Result<Tensor, RlError> {
        let t = batch_tensor(&self.obs_shape, obs);
        match self.actor.forward(tape, &t, ctxs)? {
            PolicyOutput::Categorical { logits } => Ok(logits),
            PolicyOutput::Gaussian { .. } => Err(RlError::Contract(
                "ppo expects a categorical policy head".into(),
            )),
        }
    }
}

struct FlatSample<'a> {
    obs: &'a [f64],
    ctx: usize,
    action: usize,
    old_logp: f64,
    advantage: f64,
    target: f64,
}

/// One full update from a collected rollout: GAE (standardized), clipped
/// policy epochs, then the value regression epochs.
pub fn ppo_update(agent: &mut PpoAgent, rollout: &RolloutBatch) -> Result<PpoReport, RlError> {
    let cfg = agent.cfg.clone();
    let gae = compute_gae(rollout, cfg.gamma, cfg.lambda)?;
    let mut advantages = gae.advantages;
    standardize(&mut advantages);

    let n_tasks = rollout.per_task.len();
    let mut flat: Vec<FlatSample> = Vec::with_capacity(rollout.total_steps());
    for (task, steps) in rollout.per_task.iter().enumerate() {
        for (i, s) in steps.iter().enumerate() {
            let Action::Discrete(a) = s.action else {
                return Err(RlError::Contract("ppo requires discrete actions".into()));
            };
            flat.push(FlatSample {
                obs: &s.obs,
                ctx: s.ctx,
                action: a,
                old_logp: s.logp,
                advantage: advantages[task][i],
                target: gae.targets[task][i],
            });
        }
    }

    let mut report = PpoReport {
        per_task_policy: vec![0.0; n_tasks],
        per_task_critic: vec![0.0; n_tasks],
        ..Default::default()
    };
    let mut idx: Vec<usize> = (0..flat.len()).collect();

    // ---- policy epochs ----
    let mut policy_loss_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut batches = 0usize;
    for epoch in 0..cfg.policy_epochs {
        idx.shuffle(&mut agent.update_rng);
        for chunk in idx.chunks(cfg.policy_batch) {
            let (loss, entropy, per_task) = if agent.pcgrad && n_tasks > 1 {
                policy_minibatch_pcgrad(agent, &flat, chunk)?
            } else {
                policy_minibatch(agent, &flat, chunk)?
            };
            if !loss.is_finite() {
                return Err(RlError::NonFinite {
                    what: "policy loss".into(),
                    per_task,
                });
            }
            agent.opt_policy.step();
            agent.opt_policy.zero_grad();
            if epoch == 0 {
                for (t, l) in per_task.iter().enumerate() {
                    report.per_task_policy[t] += l;
                }
            }
            policy_loss_sum += loss;
            entropy_sum += entropy;
            batches += 1;
        }
    }
    report.policy_loss = policy_loss_sum / batches.max(1) as f64;
    report.entropy = entropy_sum / batches.max(1) as f64;

    // ---- critic epochs ----
    let mut critic_loss_sum = 0.0;
    let mut critic_batches = 0usize;
    for epoch in 0..cfg.critic_epochs {
        idx.shuffle(&mut agent.update_rng);
        for chunk in idx.chunks(cfg.critic_batch) {
            let tape = Tape::new();
            let (obs_t, ctxs) = gather(agent, &flat, chunk);
            let targets: Vec<f64> = chunk.iter().map(|&i| flat[i].target).collect();
            let target_t = Tensor::from_vec(&[chunk.len()], targets)?;
            let v = agent.critic.forward(&tape, &obs_t, &ctxs, None)?;
            let diff = tape.sub(&v, &target_t)?;
            let sq = tape.mul(&diff, &diff)?;
            let loss = tape.mean(&sq)?;
            let loss_v = loss.value();
            if !loss_v.is_finite() {
                return Err(RlError::NonFinite {
                    what: "critic loss".into(),
                    per_task: per_task_means(&sq.to_vec(), &ctxs, n_tasks),
                });
            }
            tape.backward(&loss)?;
            agent.opt_critic.step();
            agent.opt_critic.zero_grad();
            if epoch == 0 {
                for (t, l) in per_task_means(&sq.to_vec(), &ctxs, n_tasks).iter().enumerate() {
                    report.per_task_critic[t] += l;
                }
            }
            critic_loss_sum += loss_v;
            critic_batches += 1;
        }
    }
    report.critic_loss = critic_loss_sum / critic_batches.max(1) as f64;
    Ok(report)
}

fn gather(agent: &PpoAgent, flat: &[FlatSample], chunk: &[usize]) -> (Tensor, Vec<usize>) {
    let obs: Vec<Vec<f64>> = chunk.iter().map(|&i| flat[i].obs.to_vec()).collect();
    let ctxs: Vec<usize> = chunk.iter().map(|&i| flat[i].ctx).collect();
    (agent.batch_tensor(&obs), ctxs)
}

/// Per-row clipped-surrogate losses for one minibatch; returns the scalar
/// loss tensor plus the per-row negated objective for diagnostics.
fn policy_rows(
    agent: &PpoAgent,
    tape: &Tape,
    flat: &[FlatSample],
    rows: &[usize],
) -> Result<(Tensor, Tensor, Option<Tensor>), RlError> {
    let (obs_t, ctxs) = gather(agent, flat, rows);
    let actions: Vec<usize> = rows.iter().map(|&i| flat[i].action).collect();
    let old_logp = Tensor::from_vec(
        &[rows.len()],
        rows.iter().map(|&i| flat[i].old_logp).collect(),
    )?;
    let adv = Tensor::from_vec(
        &[rows.len()],
        rows.iter().map(|&i| flat[i].advantage).collect(),
    )?;
    let trace = agent.actor.net.forward_traced(tape, &obs_t, &ctxs)?;
    let logits = trace.output.clone();
    if agent.actor.gaussian_dim.is_some() {
        return Err(RlError::Contract("ppo expects categorical output".into()));
    }
    let ls = tape.log_softmax(&logits)?;
    let logp = tape.take_per_row(&ls, &actions)?;
    let ratio = tape.exp(&tape.sub(&logp, &old_logp)?)?;
    let surr1 = tape.mul(&ratio, &adv)?;
    let clipped = tape.clamp(&ratio, 1.0 - agent.cfg.clip, 1.0 + agent.cfg.clip)?;
    let surr2 = tape.mul(&clipped, &adv)?;
    let surr = tape.minimum(&surr1, &surr2)?;
    let p = tape.exp(&ls)?;
    let pls = tape.mul(&p, &ls)?;
    let ent_rows = tape.neg(&tape.row_sum(&pls)?)?;
    // per-row loss = -(surrogate + c_e * entropy)
    let obj_rows = tape.add(&surr, &tape.mul_scalar(&ent_rows, agent.cfg.entropy_coef)?)?;
    let loss_rows = tape.neg(&obj_rows)?;
    let entropy = tape.mean(&ent_rows)?;
    // the cosine-similarity baseline adds its Gram residual, weighted by 1
    let reg = if matches!(
        agent.actor.net.representation,
        crate::mixture::Representation::CosineSim
    ) {
        Some(super::cosine::cosine_reg_loss(tape, &trace.reps)?)
    } else {
        None
    };
    Ok((loss_rows, entropy, reg))
}

fn policy_minibatch(
    agent: &mut PpoAgent,
    flat: &[FlatSample],
    chunk: &[usize],
) -> Result<(f64, f64, Vec<f64>), RlError> {
    let n_tasks = agent.actor.net.task_encoder.n_contexts();
    let tape = Tape::new();
    let (loss_rows, entropy, reg) = policy_rows(agent, &tape, flat, chunk)?;
    let mut loss = tape.mean(&loss_rows)?;
    if let Some(reg) = reg {
        loss = tape.add(&loss, &reg)?;
    }
    tape.backward(&loss)?;
    let ctxs: Vec<usize> = chunk.iter().map(|&i| flat[i].ctx).collect();
    let per_task = per_task_means(&loss_rows.to_vec(), &ctxs, n_tasks);
    Ok((loss.value(), entropy.value(), per_task))
}

/// Per-task backward passes over the shared parameters, surgery on the
/// flattened gradients, then one combined step. Per-task head gradients are
/// task-local and pass through untouched.
fn policy_minibatch_pcgrad(
    agent: &mut PpoAgent,
    flat: &[FlatSample],
    chunk: &[usize],
) -> Result<(f64, f64, Vec<f64>), RlError> {
    let n_tasks = agent.actor.net.task_encoder.n_contexts();
    let shared = agent.actor.net.shared_params();
    let mut task_rows: Vec<Vec<usize>> = vec![Vec::new(); n_tasks];
    for &i in chunk {
        task_rows[flat[i].ctx].push(i);
    }
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut per_task = vec![0.0; n_tasks];
    let mut loss_total = 0.0;
    let mut entropy_total = 0.0;
    let mut present = 0usize;
    for (task, rows) in task_rows.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        present += 1;
        let tape = Tape::new();
        let (loss_rows, entropy, reg) = policy_rows(agent, &tape, flat, rows)?;
        // weight by the task's share so the sum matches the joint mean
        let weight = rows.len() as f64 / chunk.len() as f64;
        let mut loss = tape.mean(&loss_rows)?;
        if let Some(reg) = reg {
            loss = tape.add(&loss, &reg)?;
        }
        let loss = tape.mul_scalar(&loss, weight)?;
        tape.backward(&loss)?;
        per_task[task] = loss_rows.to_vec().iter().sum::<f64>() / rows.len() as f64;
        loss_total += loss.value();
        entropy_total += entropy.value() * weight;
        // snapshot and clear the shared gradients; head gradients stay
        let mut flat_grad = Vec::new();
        for p in &shared {
            match p.grad() {
                Some(g) => flat_grad.extend_from_slice(&g),
                None => flat_grad.extend(std::iter::repeat_n(0.0, p.numel())),
            }
            p.zero_grad();
        }
        grads.push(flat_grad);
    }
    let combined = if present >= 2 {
        pcgrad_project(&grads, &mut agent.update_rng)?
    } else {
        grads.pop().unwrap_or_default()
    };
    let mut off = 0;
    for p in &shared {
        let n = p.numel();
        p.accumulate_grad(&combined[off..off + n]);
        off += n;
    }
    Ok((loss_total, entropy_total, per_task))
}

fn per_task_means(values: &[f64], ctxs: &[usize], n_tasks: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_tasks];
    let mut counts = vec![0usize; n_tasks];
    for (v, &c) in values.iter().zip(ctxs) {
        sums[c] += v;
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

pub(crate) fn batch_tensor(obs_shape: &[usize], obs: &[Vec<f64>]) -> Tensor {
    let per = obs_shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(obs.len() * per);
    for o in obs {
        debug_assert_eq!(o.len(), per);
        data.extend_from_slice(o);
    }
    let mut shape = vec![obs.len()];
    // conv inputs keep their [c, h, w] layout; flat inputs stay [B, n]
    shape.extend_from_slice(obs_shape);
    Tensor::raw(shape, data, false)
}
