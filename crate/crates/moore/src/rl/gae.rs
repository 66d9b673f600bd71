//! Generalized advantage estimation over episode-contiguous rollouts.

use super::rollout::RolloutBatch;
use super::RlError;

/// Per-task advantages and value targets, in rollout order, before any
/// standardization.
pub struct GaeResult {
    pub advantages: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Standard recursion: delta_t = r_t + gamma * V(s_{t+1}) * !absorbing - V(s_t),
/// A_t = delta_t + gamma * lambda * A_{t+1} within an episode. Episodes
/// bootstrap zero at absorbing states and V(s') at truncations (folded into
/// each step's recorded next_value).
pub fn compute_gae(rollout: &RolloutBatch, gamma: f64, lambda: f64) -> Result<GaeResult, RlError> {
    if rollout.per_task.iter().all(|t| t.is_empty()) {
        return Err(RlError::Contract("compute_gae on an empty rollout".into()));
    }
    let mut advantages = Vec::with_capacity(rollout.per_task.len());
    let mut targets = Vec::with_capacity(rollout.per_task.len());
    for steps in &rollout.per_task {
        let mut adv = vec![0.0; steps.len()];
        let mut acc = 0.0;
        for (i, step) in steps.iter().enumerate().rev() {
            let boot = if step.absorbing { 0.0 } else { step.next_value };
            let delta = step.reward + gamma * boot - step.value;
            acc = if step.last {
                delta
            } else {
                delta + gamma * lambda * acc
            };
            adv[i] = acc;
        }
        let tgt: Vec<f64> = steps.iter().zip(&adv).map(|(s, a)| s.value + a).collect();
        advantages.push(adv);
        targets.push(tgt);
    }
    Ok(GaeResult {
        advantages,
        targets,
    })
}

/// In-place standardization to mean 0 / std 1 across every task's
/// advantages jointly (eps 1e-8).
pub fn standardize(advantages: &mut [Vec<f64>]) {
    let n: usize = advantages.iter().map(|a| a.len()).sum();
    if n == 0 {
        return;
    }
    let mean: f64 = advantages.iter().flatten().sum::<f64>() / n as f64;
    let var: f64 = advantages
        .iter()
        .flatten()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    let denom = var.sqrt() + 1e-8;
    for task in advantages.iter_mut() {
        for a in task.iter_mut() {
            *a = (*a - mean) / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::rollout::RolloutStep;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step(reward: f64, value: f64, next_value: f64, absorbing: bool, last: bool) -> RolloutStep {
        RolloutStep {
            obs: vec![0.0],
            action: crate::envs::Action::Discrete(0),
            ctx: 0,
            reward,
            absorbing,
            last,
            logp: 0.0,
            value,
            next_value,
        }
    }

    #[test]
    fn single_terminal_step() {
        let rollout = RolloutBatch {
            per_task: vec![vec![step(1.0, 0.0, 0.0, true, true)]],
        };
        let g = compute_gae(&rollout, 0.99, 0.95).unwrap();
        assert_eq!(g.advantages[0], vec![1.0]);
        assert_eq!(g.targets[0], vec![1.0]);
    }

    #[test]
    fn zero_rewards_zero_values_give_zero_advantage() {
        let rollout = RolloutBatch {
            per_task: vec![vec![
                step(0.0, 0.0, 0.0, false, false),
                step(0.0, 0.0, 0.0, true, true),
            ]],
        };
        let g = compute_gae(&rollout, 0.99, 0.95).unwrap();
        assert_eq!(g.advantages[0], vec![0.0, 0.0]);
    }

    #[test]
    fn two_step_hand_recursion() {
        // r = (0, 1), V = 0: A1 = 1, A0 = 0.99 * 0.95 * 1 = 0.9405
        let rollout = RolloutBatch {
            per_task: vec![vec![
                step(0.0, 0.0, 0.0, false, false),
                step(1.0, 0.0, 0.0, true, true),
            ]],
        };
        let g = compute_gae(&rollout, 0.99, 0.95).unwrap();
        assert!((g.advantages[0][0] - 0.9405).abs() < 1e-12);
        assert!((g.advantages[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_rollout_is_an_error() {
        let rollout = RolloutBatch {
            per_task: vec![vec![], vec![]],
        };
        assert!(compute_gae(&rollout, 0.99, 0.95).is_err());
    }

    fn random_episode(rng: &mut ChaCha8Rng, len: usize, truncated: bool) -> Vec<RolloutStep> {
        let values: Vec<f64> = (0..=len).map(|_| rng.random_range(-1.0..1.0)).collect();
        (0..len)
            .map(|t| {
                let last = t == len - 1;
                let absorbing = last && !truncated;
                step(
                    rng.random_range(-1.0..1.0),
                    values[t],
                    values[t + 1],
                    absorbing,
                    last,
                )
            })
            .collect()
    }

    #[test]
    fn lambda_one_equals_discounted_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..100 {
            let len = rng.random_range(1..12);
            let truncated = case % 2 == 0;
            let ep = random_episode(&mut rng, len, truncated);
            let rollout = RolloutBatch {
                per_task: vec![ep.clone()],
            };
            let gamma = 0.97;
            let g = compute_gae(&rollout, gamma, 1.0).unwrap();
            for (t, step_t) in ep.iter().enumerate() {
                // MC: sum of discounted rewards from t, plus the discounted
                // bootstrap for truncated tails, minus V(s_t)
                let mut ret = 0.0;
                for (l, s) in ep[t..].iter().enumerate() {
                    ret += gamma.powi(l as i32) * s.reward;
                }
                let tail = ep.last().unwrap();
                if !tail.absorbing {
                    ret += gamma.powi((len - t) as i32) * tail.next_value;
                }
                let want = ret - step_t.value;
                assert!(
                    (g.advantages[0][t] - want).abs() < 1e-12,
                    "case {case} t {t}: {} vs {want}",
                    g.advantages[0][t]
                );
            }
        }
    }

    #[test]
    fn lambda_zero_equals_one_step_td_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..100 {
            let len = rng.random_range(1..12);
            let ep = random_episode(&mut rng, len, case % 3 == 0);
            let rollout = RolloutBatch {
                per_task: vec![ep.clone()],
            };
            let gamma = 0.99;
            let g = compute_gae(&rollout, gamma, 0.0).unwrap();
            for (t, step_t) in ep.iter().enumerate() {
                let boot = if step_t.absorbing { 0.0 } else { step_t.next_value };
                let want = step_t.reward + gamma * boot - step_t.value;
                assert!((g.advantages[0][t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standardize_centers_and_scales() {
        let mut advs = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0]];
        standardize(&mut advs);
        let flat: Vec<f64> = advs.iter().flatten().cloned().collect();
        let mean: f64 = flat.iter().sum::<f64>() / flat.len() as f64;
        let var: f64 = flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}
