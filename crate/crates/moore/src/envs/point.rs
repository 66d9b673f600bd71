//! Continuous point-goal family: a damped double-integrator agent in a
//! [-1,1]^2 arena, with reach/push/pick-style task variants and goals
//! randomized per episode. Observations are flat and share one layout
//! across all variants: [agent pos, agent vel, object pos, goal pos].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EnvError;

pub const POINT_OBS_DIM: usize = 8;
pub const POINT_ACTION_DIM: usize = 2;
/// Episode length for the continuous suite.
pub const POINT_HORIZON: usize = 150;
pub const ARENA: f64 = 1.0;
const DT: f64 = 0.1;
const ACCEL: f64 = 1.0;
const VMAX: f64 = 1.0;
const SUCCESS_DIST: f64 = 0.1;
const CONTACT_DIST: f64 = 0.15;
const SUCCESS_BONUS: f64 = 10.0;

/// Desk-scale task variants. The first four form the small suite; all ten
/// form the large one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointTask {
    Reach,
    Push,
    PickPlace,
    Touch,
    ReachFar,
    ReachLeft,
    PushFar,
    PickNear,
    Hold,
    ReachSlow,
}

impl PointTask {
    pub fn name(self) -> &'static str {
        match self {
            PointTask::Reach => "reach",
            PointTask::Push => "push",
            PointTask::PickPlace => "pick_place",
            PointTask::Touch => "touch",
            PointTask::ReachFar => "reach_far",
            PointTask::ReachLeft => "reach_left",
            PointTask::PushFar => "push_far",
            PointTask::PickNear => "pick_near",
            PointTask::Hold => "hold",
            PointTask::ReachSlow => "reach_slow",
        }
    }

    fn damping(self) -> f64 {
        match self {
            PointTask::ReachSlow => 0.7,
            _ => 0.9,
        }
    }
}

pub struct PointEnv {
    task: PointTask,
    suite_seed: u64,
    task_id: usize,
    agent: [f64; 2],
    vel: [f64; 2],
    object: [f64; 2],
    goal: [f64; 2],
    carrying: bool,
    hold_count: usize,
    t: usize,
    done: bool,
}

impl PointEnv {
    pub fn new(task: PointTask, suite_seed: u64, task_id: usize) -> Self {
        let mut env = Self {
            task,
            suite_seed,
            task_id,
            agent: [0.0; 2],
            vel: [0.0; 2],
            object: [0.0; 2],
            goal: [0.0; 2],
            carrying: false,
            hold_count: 0,
            t: 0,
            done: true,
        };
        env.reset(0);
        env
    }

    pub fn task(&self) -> PointTask {
        self.task
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    fn episode_rng(&self, episode_seed: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.suite_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(self.task_id as u64).to_le_bytes());
        seed[16..24].copy_from_slice(&episode_seed.to_le_bytes());
        seed[24] = 0x50; // domain tag: point layouts
        ChaCha8Rng::from_seed(seed)
    }

    pub fn reset(&mut self, episode_seed: u64) -> Vec<f64> {
        let mut rng = self.episode_rng(episode_seed);
        self.agent = [rng.random_range(-0.3..=0.3), rng.random_range(-0.3..=0.3)];
        self.vel = [0.0; 2];
        // goals are redrawn until they respect the variant's region and are
        // not trivially on top of the start position
        let bound = 0.9 * ARENA;
        loop {
            let g = match self.task {
                PointTask::ReachLeft => {
                    [rng.random_range(-bound..=-0.1), rng.random_range(-bound..=bound)]
                }
                PointTask::ReachFar | PointTask::PushFar => loop {
                    let c = [
                        rng.random_range(-bound..=bound),
                        rng.random_range(-bound..=bound),
                    ];
                    if (c[0] * c[0] + c[1] * c[1]).sqrt() > 0.6 {
                        break c;
                    }
                },
                _ => [
                    rng.random_range(-bound..=bound),
                    rng.random_range(-bound..=bound),
                ],
            };
            let dx = g[0] - self.agent[0];
            let dy = g[1] - self.agent[1];
            if (dx * dx + dy * dy).sqrt() > 0.3 {
                self.goal = g;
                break;
            }
        }
        self.object = match self.task {
            PointTask::PickNear => [rng.random_range(-0.2..=0.2), rng.random_range(-0.2..=0.2)],
            _ => [
                rng.random_range(-0.6..=0.6),
                rng.random_range(-0.6..=0.6),
            ],
        };
        self.carrying = false;
        self.hold_count = 0;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![
            self.agent[0],
            self.agent[1],
            self.vel[0],
            self.vel[1],
            self.object[0],
            self.object[1],
            self.goal[0],
            self.goal[1],
        ]
    }

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool, bool), EnvError> {
        if action.len() != POINT_ACTION_DIM {
            return Err(EnvError::BadAction(format!(
                "continuous action has dim {}, expected {POINT_ACTION_DIM}",
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::BadAction("non-finite action".into()));
        }
        if self.done {
            return Err(EnvError::BadAction(
                "step called on a finished episode".into(),
            ));
        }
        self.t += 1;
        let damp = self.task.damping();
        let prev_agent = self.agent;
        for (i, raw) in action.iter().enumerate().take(2) {
            let a = raw.clamp(-1.0, 1.0);
            self.vel[i] = ((self.vel[i] + a * ACCEL * DT) * damp).clamp(-VMAX, VMAX);
            self.agent[i] = (self.agent[i] + self.vel[i] * DT).clamp(-ARENA, ARENA);
        }
        // object coupling
        match self.task {
            PointTask::Push | PointTask::PushFar => {
                if Self::dist(self.agent, self.object) < CONTACT_DIST {
                    let dx = self.agent[0] - prev_agent[0];
                    let dy = self.agent[1] - prev_agent[1];
                    self.object[0] = (self.object[0] + dx).clamp(-ARENA, ARENA);
                    self.object[1] = (self.object[1] + dy).clamp(-ARENA, ARENA);
                }
            }
            PointTask::PickPlace | PointTask::PickNear => {
                if !self.carrying && Self::dist(self.agent, self.object) < SUCCESS_DIST {
                    self.carrying = true;
                }
                if self.carrying {
                    self.object = self.agent;
                }
            }
            _ => {}
        }
        let (mut reward, success) = self.reward_and_success();
        let absorbing = success;
        if success {
            reward += SUCCESS_BONUS;
        }
        let last = absorbing || self.t >= POINT_HORIZON;
        self.done = last;
        Ok((self.observe(), reward, absorbing, last))
    }

    fn reward_and_success(&mut self) -> (f64, bool) {
        match self.task {
            PointTask::Reach | PointTask::ReachFar | PointTask::ReachLeft | PointTask::ReachSlow => {
                let d = Self::dist(self.agent, self.goal);
                (-d, d < SUCCESS_DIST)
            }
            PointTask::Touch => {
                let d = Self::dist(self.agent, self.object);
                (-d, d < SUCCESS_DIST)
            }
            PointTask::Push | PointTask::PushFar => {
                let d_contact = Self::dist(self.agent, self.object);
                let d_goal = Self::dist(self.object, self.goal);
                (-(d_contact + d_goal) / 2.0, d_goal < SUCCESS_DIST)
            }
            PointTask::PickPlace | PointTask::PickNear => {
                let d_pick = Self::dist(self.agent, self.object);
                let d_goal = Self::dist(self.object, self.goal);
                let r = if self.carrying { -d_goal } else { -(d_pick + d_goal) / 2.0 };
                (r, self.carrying && d_goal < SUCCESS_DIST)
            }
            PointTask::Hold => {
                let d = Self::dist(self.agent, self.goal);
                if d < SUCCESS_DIST {
                    self.hold_count += 1;
                } else {
                    self.hold_count = 0;
                }
                (-d, self.hold_count >= 5)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goals_stay_inside_the_arena() {
        for (i, task) in [PointTask::Reach, PointTask::ReachFar, PointTask::ReachLeft]
            .iter()
            .enumerate()
        {
            let mut env = PointEnv::new(*task, 3, i);
            for seed in 0..10_000 {
                env.reset(seed);
                let g = env.goal();
                assert!(g[0].abs() <= ARENA && g[1].abs() <= ARENA);
                if *task == PointTask::ReachLeft {
                    assert!(g[0] < 0.0);
                }
            }
        }
    }

    #[test]
    fn observation_dim_is_shared() {
        for (i, task) in [
            PointTask::Reach,
            PointTask::Push,
            PointTask::PickPlace,
            PointTask::Touch,
            PointTask::Hold,
        ]
        .iter()
        .enumerate()
        {
            let mut env = PointEnv::new(*task, 0, i);
            assert_eq!(env.reset(0).len(), POINT_OBS_DIM);
        }
    }

    #[test]
    fn reach_scripted_controller_succeeds() {
        let mut env = PointEnv::new(PointTask::Reach, 1, 0);
        let mut obs = env.reset(2);
        for _ in 0..POINT_HORIZON {
            // accelerate toward goal, braking via damping
            let ax = (obs[6] - obs[0]) * 4.0 - obs[2] * 2.0;
            let ay = (obs[7] - obs[1]) * 4.0 - obs[3] * 2.0;
            let (o, r, absorbing, last) = env.step(&[ax, ay]).unwrap();
            obs = o;
            if absorbing {
                assert!(r > SUCCESS_BONUS - 1.0);
                return;
            }
            if last {
                break;
            }
        }
        panic!("proportional controller failed to reach the goal");
    }

    #[test]
    fn rewards_are_negative_distances_before_success() {
        let mut env = PointEnv::new(PointTask::Reach, 1, 0);
        env.reset(0);
        let (obs, r, _, _) = env.step(&[0.0, 0.0]).unwrap();
        let d = ((obs[6] - obs[0]).powi(2) + (obs[7] - obs[1]).powi(2)).sqrt();
        assert!((r + d).abs() < 1e-12);
    }

    #[test]
    fn action_validation() {
        let mut env = PointEnv::new(PointTask::Reach, 1, 0);
        env.reset(0);
        assert!(env.step(&[0.0]).is_err());
        assert!(env.step(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn resets_are_deterministic() {
        let mut env = PointEnv::new(PointTask::Push, 4, 1);
        let a = env.reset(9);
        let b = env.reset(9);
        assert_eq!(a, b);
    }
}
