//! Maximum-entropy off-policy trainer: twin Q-critics with min-backup,
//! a tanh-squashed Gaussian actor, Polyak-averaged targets, and one learned
//! temperature per task driven toward a per-task target entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::Action;
use crate::mixture::{Actor, Critic, PolicyOutput};
use crate::numkit::{Adam, Tape, Tensor};

use super::replay::ReplayBuffer;
use super::RlError;

#[derive(Debug, Clone)]
pub struct SacConfig {
    pub gamma: f64,
    pub batch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    /// Soft target interpolation factor.
    pub tau: f64,
    /// Per-task warmup transitions collected with a uniform policy.
    pub exploration_steps: usize,
    pub buffer_capacity: usize,
    pub train_frequency: usize,
}

impl Default for SacConfig {
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

/// One learnable log-temperature per task; exponentiation keeps the
/// temperature strictly positive.
pub struct TemperatureBank {
    pub log_alphas: Vec<Tensor>,
    pub target_entropy: f64,
}

impl TemperatureBank {
    pub fn new(n_tasks: usize, action_dim: usize) -> Self {
        Self {
            log_alphas: (0..n_tasks)
                .map(|_| Tensor::param(&[], vec![0.0]).unwrap())
                .collect(),
            target_entropy: -(action_dim as f64),
        }
    }

    pub fn alpha(&self, task: usize) -> f64 {
        self.log_alphas[task].value().exp()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SacReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: f64,
    pub mean_logp: f64,
    pub alphas: Vec<f64>,
    pub per_task_critic: Vec<f64>,
}

pub struct SacAgent {
    pub actor: Actor,
    pub critic1: Critic,
    pub critic2: Critic,
    pub target1: Critic,
    pub target2: Critic,
    pub temps: TemperatureBank,
    pub cfg: SacConfig,
    pub action_dim: usize,
    obs_dim: usize,
    opt_actor: Adam,
    opt_critic: Adam,
    opt_alpha: Adam,
    update_rng: ChaCha8Rng,
    updates: u64,
}

impl SacAgent {
    /// `target1`/`target2` must be architecture twins of the critics; their
    /// parameters are overwritten with the online values here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        actor: Actor,
        critic1: Critic,
        critic2: Critic,
        target1: Critic,
        target2: Critic,
        temps: TemperatureBank,
        cfg: SacConfig,
        action_dim: usize,
        obs_dim: usize,
        seed: u64,
    ) -> Self {
        let trainable = |ps: Vec<Tensor>| -> Vec<Tensor> {
            ps.into_iter().filter(|p| p.requires_grad()).collect()
        };
        let opt_actor = Adam::new(trainable(actor.net.all_params()), cfg.lr_actor);
        let mut critic_params = critic1.net.all_params();
        critic_params.extend(critic2.net.all_params());
        let opt_critic = Adam::new(trainable(critic_params), cfg.lr_critic);
        let opt_alpha = Adam::new(temps.log_alphas.clone(), cfg.lr_alpha);
        let agent = Self {
            actor,
            critic1,
            critic2,
            target1,
            target2,
            temps,
            cfg,
            action_dim,
            obs_dim,
            opt_actor,
            opt_critic,
            opt_alpha,
            update_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_270b_8d6a_11c3),
            updates: 0,
        };
        agent.sync_targets();
        for t in [&agent.target1, &agent.target2] {
            for p in t.net.all_params() {
                p.set_requires_grad(false);
            }
        }
        agent
    }

    fn sync_targets(&self) {
        copy_params(&self.critic1, &self.target1);
        copy_params(&self.critic2, &self.target2);
    }

    pub fn optimizers(&mut self) -> (&mut Adam, &mut Adam, &mut Adam) {
        (&mut self.opt_actor, &mut self.opt_critic, &mut self.opt_alpha)
    }

    /// Stochastic action for collection; uniform during warmup.
    pub fn act(
        &self,
        obs: &[f64],
        ctx: usize,
        explore_uniform: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, RlError> {
        if explore_uniform {
            return Ok((0..self.action_dim)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect());
        }
        let tape = Tape::inference();
        let (mean, log_std) = self.policy_params(&tape, &[obs.to_vec()], &[ctx])?;
        let (m, s) = (mean.to_vec(), log_std.to_vec());
        Ok((0..self.action_dim)
            .map(|i| {
                let eps: f64 = StandardNormal.sample(rng);
                (m[i] + s[i].exp() * eps).tanh()
            })
            .collect())
    }

    /// Mode action (tanh of the Gaussian mean) for evaluation.
    pub fn act_mode(&self, obs: &[f64], ctx: usize) -> Result<Vec<f64>, RlError> {
        let tape = Tape::inference();
        let (mean, _) = self.policy_params(&tape, &[obs.to_vec()], &[ctx])?;
        Ok(mean.to_vec().iter().map(|m| m.tanh()).collect())
    }

    fn policy_params(
        &self,
        tape: &Tape,
        obs: &[Vec<f64>],
        ctxs: &[usize],
    ) -> Result<(Tensor, Tensor), RlError> {
        let t = super::ppo::batch_tensor(&[self.obs_dim], obs);
        match self.actor.forward(tape, &t, ctxs)? {
            PolicyOutput::Gaussian { mean, log_std } => Ok((mean, log_std)),
            PolicyOutput::Categorical { .. } => Err(RlError::Contract(
                "sac expects a gaussian policy head".into(),
            )),
        }
    }
}

/// Splits a [B, 2*adim] head output into (mean, clamped log-std), matching
/// the actor's own convention.
fn split_gaussian(
    tape: &Tape,
    out: &Tensor,
    adim: usize,
) -> Result<(Tensor, Tensor), RlError> {
    let batch = out.shape()[0];
    let reshaped = tape.reshape(out, &[batch * 2, adim])?;
    let mean_rows: Vec<usize> = (0..batch).map(|r| 2 * r).collect();
    let std_rows: Vec<usize> = (0..batch).map(|r| 2 * r + 1).collect();
    let mean = tape.select_rows(&reshaped, &mean_rows)?;
    let log_std = tape.clamp(
        &tape.select_rows(&reshaped, &std_rows)?,
        crate::mixture::LOG_STD_MIN,
        crate::mixture::LOG_STD_MAX,
    )?;
    Ok((mean, log_std))
}

fn copy_params(src: &Critic, dst: &Critic) {
    for (s, d) in src.net.all_params().iter().zip(dst.net.all_params()) {
        d.set_data(&s.to_vec());
    }
}

/// dst <- tau * src + (1 - tau) * dst
pub fn polyak_update(src: &Critic, dst: &Critic, tau: f64) {
    for (s, d) in src.net.all_params().iter().zip(dst.net.all_params()) {
        let sv = s.to_vec();
        d.update_data(|dv| {
            for (x, y) in dv.iter_mut().zip(&sv) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        });
    }
}

/// Log-density of a tanh-squashed Gaussian at u (pre-squash), summed over
/// action dimensions -> [B].
pub fn gaussian_tanh_logp(
    tape: &Tape,
    u: &Tensor,
    mean: &Tensor,
    log_std: &Tensor,
) -> Result<Tensor, RlError> {
    let action_dim = mean.shape()[1] as f64;
    let std = tape.exp(log_std)?;
    let z = tape.div(&tape.sub(u, mean)?, &std)?;
    let z2 = tape.mul(&z, &z)?;
    let quad = tape.mul_scalar(&tape.row_sum(&z2)?, -0.5)?;
    let logdet = tape.neg(&tape.row_sum(log_std)?)?;
    let norm_const = -0.5 * action_dim * (2.0 * std::f64::consts::PI).ln();
    let gauss = tape.add_scalar(&tape.add(&quad, &logdet)?, norm_const)?;
    // squash correction: sum_d ln(1 - tanh(u)^2 + eps)
    let th = tape.tanh(u)?;
    let th2 = tape.mul(&th, &th)?;
    let inner = tape.add_scalar(&tape.neg(&th2)?, 1.0 + 1e-6)?;
    let corr = tape.row_sum(&tape.ln(&inner)?)?;
    Ok(tape.sub(&gauss, &corr)?)
}

/// One gradient step for critics, actor, and temperatures from an
/// equal-per-task replay sample, followed by the Polyak target update.
pub fn sac_update(agent: &mut SacAgent, buffer: &mut ReplayBuffer) -> Result<SacReport, RlError> {
    if buffer.min_len() < agent.cfg.exploration_steps {
        return Err(RlError::Contract(format!(
            "sac update before warmup: a task buffer holds {} < {} transitions",
            buffer.min_len(),
            agent.cfg.exploration_steps
        )));
    }
    agent.updates += 1;
    let n_tasks = buffer.n_tasks();
    let batch = {
        let mut rng_batch = agent.update_rng.clone();
        let b = buffer.sample_equal(agent.cfg.batch, &mut rng_batch);
        agent.update_rng = rng_batch;
        b
    };
    let bsz = batch.len();
    let adim = agent.action_dim;

    let obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
    let next_obs: Vec<Vec<f64>> = batch.iter().map(|t| t.next_obs.clone()).collect();
    let ctxs: Vec<usize> = batch.iter().map(|t| t.task).collect();
    let mut act_data = Vec::with_capacity(bsz * adim);
    for t in &batch {
        let Action::Continuous(a) = &t.action else {
            return Err(RlError::Contract("sac requires continuous actions".into()));
        };
        act_data.extend_from_slice(a);
    }
    let actions = Tensor::from_vec(&[bsz, adim], act_data)?;

    // ---- targets (no gradients) ----
    let y = compute_targets(agent, &batch, &next_obs, &ctxs)?;
    let y_t = Tensor::from_vec(&[bsz], y)?;

    // ---- critic regression ----
    let tape = Tape::new();
    let obs_t = super::ppo::batch_tensor(&[agent.obs_dim], &obs);
    let q1 = agent.critic1.forward(&tape, &obs_t, &ctxs, Some(&actions))?;
    let q2 = agent.critic2.forward(&tape, &obs_t, &ctxs, Some(&actions))?;
    let d1 = tape.sub(&q1, &y_t)?;
    let d2 = tape.sub(&q2, &y_t)?;
    let sq1 = tape.mul(&d1, &d1)?;
    let sq2 = tape.mul(&d2, &d2)?;
    let critic_loss = tape.add(&tape.mean(&sq1)?, &tape.mean(&sq2)?)?;
    let critic_loss_v = critic_loss.value();
    let per_task_critic = {
        let mut sums = vec![0.0; n_tasks];
        let mut counts = vec![0usize; n_tasks];
        for ((a, b), &c) in sq1.to_vec().iter().zip(sq2.to_vec().iter()).zip(&ctxs) {
            sums[c] += a + b;
            counts[c] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    if !critic_loss_v.is_finite() {
        return Err(RlError::NonFinite {
            what: "sac critic loss".into(),
            per_task: per_task_critic,
        });
    }
    tape.backward(&critic_loss)?;
    agent.opt_critic.step();
    agent.opt_critic.zero_grad();

    // ---- actor step (critics frozen for this pass) ----
    let critic_params: Vec<Tensor> = agent
        .critic1
        .net
        .all_params()
        .into_iter()
        .chain(agent.critic2.net.all_params())
        .collect();
    for p in &critic_params {
        p.set_requires_grad(false);
    }
    let tape = Tape::new();
    let obs_batch = super::ppo::batch_tensor(&[agent.obs_dim], &obs);
    let trace = agent.actor.net.forward_traced(&tape, &obs_batch, &ctxs)?;
    let (mean, log_std) = split_gaussian(&tape, &trace.output, adim)?;
    let noise_data: Vec<f64> = (0..bsz * adim)
        .map(|_| StandardNormal.sample(&mut agent.update_rng))
        .collect();
    let noise = Tensor::from_vec(&[bsz, adim], noise_data)?;
    let std = tape.exp(&log_std)?;
    let u = tape.add(&mean, &tape.mul(&std, &noise)?)?;
    let a_new = tape.tanh(&u)?;
    let logp = gaussian_tanh_logp(&tape, &u, &mean, &log_std)?;
    let q1a = agent.critic1.forward(&tape, &obs_t, &ctxs, Some(&a_new))?;
    let q2a = agent.critic2.forward(&tape, &obs_t, &ctxs, Some(&a_new))?;
    let qmin = tape.minimum(&q1a, &q2a)?;
    let alpha_rows = Tensor::from_vec(
        &[bsz],
        ctxs.iter().map(|&c| agent.temps.alpha(c)).collect(),
    )?;
    let ent_term = tape.mul(&alpha_rows, &logp)?;
    let mut actor_loss = tape.mean(&tape.sub(&ent_term, &qmin)?)?;
    if matches!(
        agent.actor.net.representation,
        crate::mixture::Representation::CosineSim
    ) {
        let reg = super::cosine::cosine_reg_loss(&tape, &trace.reps)?;
        actor_loss = tape.add(&actor_loss, &reg)?;
    }
    let actor_loss_v = actor_loss.value();
    if !actor_loss_v.is_finite() {
        for p in &critic_params {
            p.set_requires_grad(true);
        }
        return Err(RlError::NonFinite {
            what: "sac actor loss".into(),
            per_task: vec![],
        });
    }
    tape.backward(&actor_loss)?;
    agent.opt_actor.step();
    agent.opt_actor.zero_grad();
    for p in &critic_params {
        p.set_requires_grad(true);
        p.zero_grad();
    }

    // ---- per-task temperatures toward the shared target entropy ----
    let logp_data = logp.to_vec();
    let tape = Tape::new();
    let mut alpha_loss: Option<Tensor> = None;
    for task in 0..n_tasks {
        let rows: Vec<usize> = ctxs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == task)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let err = rows
            .iter()
            .map(|&i| logp_data[i] + agent.temps.target_entropy)
            .sum::<f64>()
            / rows.len() as f64;
        let term = tape.mul_scalar(&agent.temps.log_alphas[task], -err)?;
        alpha_loss = Some(match alpha_loss {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    let alpha_loss_v = if let Some(loss) = alpha_loss {
        tape.backward(&loss)?;
        agent.opt_alpha.step();
        agent.opt_alpha.zero_grad();
        loss.value()
    } else {
        0.0
    };

    polyak_update(&agent.critic1, &agent.target1, agent.cfg.tau);
    polyak_update(&agent.critic2, &agent.target2, agent.cfg.tau);

    Ok(SacReport {
        critic_loss: critic_loss_v,
        actor_loss: actor_loss_v,
        alpha_loss: alpha_loss_v,
        mean_logp: logp_data.iter().sum::<f64>() / bsz as f64,
        alphas: (0..n_tasks).map(|t| agent.temps.alpha(t)).collect(),
        per_task_critic,
    })
}

/// y = r + gamma * !absorbing * (min(Q1', Q2')(s', a') - alpha_c log pi(a'|s')),
/// computed without recording gradients.
pub(crate) fn compute_targets(
    agent: &mut SacAgent,
    batch: &[super::rollout::Transition],
    next_obs: &[Vec<f64>],
    ctxs: &[usize],
) -> Result<Vec<f64>, RlError> {
    let bsz = batch.len();
    let adim = agent.action_dim;
    let tape = Tape::inference();
    let (mean, log_std) = agent.policy_params(&tape, next_obs, ctxs)?;
    let noise_data: Vec<f64> = (0..bsz * adim)
        .map(|_| StandardNormal.sample(&mut agent.update_rng))
        .collect();
    let noise = Tensor::from_vec(&[bsz, adim], noise_data)?;
    let std = tape.exp(&log_std)?;
    let u = tape.add(&mean, &tape.mul(&std, &noise)?)?;
    let a_next = tape.tanh(&u)?;
    let logp = gaussian_tanh_logp(&tape, &u, &mean, &log_std)?;
    let next_t = super::ppo::batch_tensor(&[agent.obs_dim], next_obs);
    let q1 = agent.target1.forward(&tape, &next_t, ctxs, Some(&a_next))?;
    let q2 = agent.target2.forward(&tape, &next_t, ctxs, Some(&a_next))?;
    let (q1d, q2d, lpd) = (q1.to_vec(), q2.to_vec(), logp.to_vec());
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let backup = q1d[i].min(q2d[i]) - agent.temps.alpha(tr.task) * lpd[i];
            let mask = if tr.absorbing { 0.0 } else { 1.0 };
            tr.reward + agent.cfg.gamma * mask * backup
        })
        .collect())
}
