//! Task suites exposing context alongside observations: a grid family and
//! a continuous point-goal family, each a registry of per-task
//! constructors over a shared observation space.

pub mod grid;
pub mod point;

use crate::mixture::TaskContext;

pub use grid::{optimal_return as grid_optimal_return, GridEnv, GridObservation, GridTask,
    GRID_ACTIONS, GRID_HORIZON, VIEW};
pub use point::{PointEnv, PointTask, ARENA, POINT_ACTION_DIM, POINT_HORIZON, POINT_OBS_DIM};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown suite name: {0}")]
    UnknownSuite(String),
    #[error("task index {0} out of range")]
    BadTask(usize),
    #[error("invalid action: {0}")]
    BadAction(String),
    #[error("layout is unsolvable for task {0}")]
    Unsolvable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    Grid,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

/// Registry of task constructors plus the context space. Tasks are ordered
/// so that smaller rosters are prefixes of larger ones; context ids are
/// stable under suite growth, which the transfer protocol relies on.
#[derive(Debug, Clone)]
pub struct ScMdpSuite {
    pub name: String,
    pub kind: SuiteKind,
    pub seed: u64,
    grid_tasks: Vec<GridTask>,
    point_tasks: Vec<PointTask>,
}

const GRID_MT3: [GridTask; 3] = [GridTask::LavaGap, GridTask::RedBlueDoors, GridTask::Memory];
const GRID_MT5: [GridTask; 5] = [
    GridTask::LavaGap,
    GridTask::RedBlueDoors,
    GridTask::Memory,
    GridTask::DoorKey,
    GridTask::MultiRoom,
];
const GRID_MT7: [GridTask; 7] = [
    GridTask::LavaGap,
    GridTask::RedBlueDoors,
    GridTask::Memory,
    GridTask::DoorKey,
    GridTask::MultiRoom,
    GridTask::DistShift,
    GridTask::SimpleCrossing,
];
const POINT_MT4: [PointTask; 4] = [
    PointTask::Reach,
    PointTask::Push,
    PointTask::PickPlace,
    PointTask::Touch,
];
const POINT_MT10: [PointTask; 10] = [
    PointTask::Reach,
    PointTask::Push,
    PointTask::PickPlace,
    PointTask::Touch,
    PointTask::ReachFar,
    PointTask::ReachLeft,
    PointTask::PushFar,
    PointTask::PickNear,
    PointTask::Hold,
    PointTask::ReachSlow,
];

impl ScMdpSuite {
    /// Builds a suite by name. Besides the five canonical rosters,
    /// `grid_solo_<task>` and `point_solo_<task>` give one-task suites for
    /// single-task sanity runs.
    pub fn make(name: &str, seed: u64) -> Result<Self, EnvError> {
        let mut suite = Self {
            name: name.to_string(),
            kind: SuiteKind::Grid,
            seed,
            grid_tasks: Vec::new(),
            point_tasks: Vec::new(),
        };
        match name {
            "grid_mt3" => suite.grid_tasks = GRID_MT3.to_vec(),
            "grid_mt5" => suite.grid_tasks = GRID_MT5.to_vec(),
            "grid_mt7" => suite.grid_tasks = GRID_MT7.to_vec(),
            "point_mt4" => {
                suite.kind = SuiteKind::Point;
                suite.point_tasks = POINT_MT4.to_vec();
            }
            "point_mt10" => {
                suite.kind = SuiteKind::Point;
                suite.point_tasks = POINT_MT10.to_vec();
            }
            other => {
                if let Some(task) = other.strip_prefix("grid_solo_") {
                    let t = GRID_MT7
                        .iter()
                        .find(|g| g.name() == task)
                        .ok_or_else(|| EnvError::UnknownSuite(other.to_string()))?;
                    suite.grid_tasks = vec![*t];
                } else if let Some(task) = other.strip_prefix("point_solo_") {
                    let t = POINT_MT10
                        .iter()
                        .find(|p| p.name() == task)
                        .ok_or_else(|| EnvError::UnknownSuite(other.to_string()))?;
                    suite.kind = SuiteKind::Point;
                    suite.point_tasks = vec![*t];
                } else {
                    return Err(EnvError::UnknownSuite(other.to_string()));
                }
            }
        }
        Ok(suite)
    }

    pub fn n_tasks(&self) -> usize {
        match self.kind {
            SuiteKind::Grid => self.grid_tasks.len(),
            SuiteKind::Point => self.point_tasks.len(),
        }
    }

    pub fn task_names(&self) -> Vec<&'static str> {
        match self.kind {
            SuiteKind::Grid => self.grid_tasks.iter().map(|t| t.name()).collect(),
            SuiteKind::Point => self.point_tasks.iter().map(|t| t.name()).collect(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.kind {
            SuiteKind::Grid => ActionSpace::Discrete(GRID_ACTIONS),
            SuiteKind::Point => ActionSpace::Continuous(POINT_ACTION_DIM),
        }
    }

    /// Network input shape shared by every task in the suite.
    pub fn obs_shape(&self) -> Vec<usize> {
        match self.kind {
            SuiteKind::Grid => GridObservation::shape().to_vec(),
            SuiteKind::Point => vec![POINT_OBS_DIM],
        }
    }

    pub fn horizon(&self) -> usize {
        match self.kind {
            SuiteKind::Grid => GRID_HORIZON,
            SuiteKind::Point => POINT_HORIZON,
        }
    }

    pub fn make_env(&self, task: usize) -> Result<Env, EnvError> {
        if task >= self.n_tasks() {
            return Err(EnvError::BadTask(task));
        }
        Ok(match self.kind {
            SuiteKind::Grid => Env::Grid(GridEnv::new(self.grid_tasks[task], self.seed, task)),
            SuiteKind::Point => Env::Point(PointEnv::new(self.point_tasks[task], self.seed, task)),
        })
    }

    pub fn context(&self, task: usize) -> Result<TaskContext, EnvError> {
        if task >= self.n_tasks() {
            return Err(EnvError::BadTask(task));
        }
        Ok(TaskContext {
            id: task,
            n_contexts: self.n_tasks(),
        })
    }

    /// BFS reference return for a grid task layout.
    pub fn optimal_return(&self, task: usize, episode_seed: u64) -> Result<f64, EnvError> {
        match self.kind {
            SuiteKind::Grid => {
                if task >= self.grid_tasks.len() {
                    return Err(EnvError::BadTask(task));
                }
                grid::optimal_return(self.grid_tasks[task], self.seed, task, episode_seed)
            }
            SuiteKind::Point => Err(EnvError::BadTask(task)),
        }
    }

    /// Index of each of this suite's tasks inside a larger suite, if the
    /// containment holds.
    pub fn indices_within(&self, larger: &ScMdpSuite) -> Option<Vec<usize>> {
        if self.kind != larger.kind {
            return None;
        }
        let mine = self.task_names();
        let theirs = larger.task_names();
        mine.iter()
            .map(|name| theirs.iter().position(|t| t == name))
            .collect()
    }
}

/// Discrete or continuous action, validated by the environment.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// A single environment instance.
pub enum Env {
    Grid(GridEnv),
    Point(PointEnv),
}

pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub absorbing: bool,
    pub last: bool,
}

impl Env {
    /// Initial state drawn from the episode seed; the context rides along.
    pub fn reset(&mut self, episode_seed: u64) -> Vec<f64> {
        match self {
            Env::Grid(e) => e.reset(episode_seed).to_input(),
            Env::Point(e) => e.reset(episode_seed),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        match (self, action) {
            (Env::Grid(e), Action::Discrete(a)) => {
                let (obs, reward, absorbing, last) = e.step(*a)?;
                Ok(StepOutcome {
                    obs: obs.to_input(),
                    reward,
                    absorbing,
                    last,
                })
            }
            (Env::Point(e), Action::Continuous(a)) => {
                let (obs, reward, absorbing, last) = e.step(a)?;
                Ok(StepOutcome {
                    obs,
                    reward,
                    absorbing,
                    last,
                })
            }
            _ => Err(EnvError::BadAction(
                "action kind does not match the environment".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosters_match_and_nest() {
        let mt3 = ScMdpSuite::make("grid_mt3", 0).unwrap();
        let mt5 = ScMdpSuite::make("grid_mt5", 0).unwrap();
        let mt7 = ScMdpSuite::make("grid_mt7", 0).unwrap();
        assert_eq!(mt3.task_names(), vec!["lava_gap", "red_blue_doors", "memory"]);
        assert_eq!(mt5.n_tasks(), 5);
        assert_eq!(mt7.n_tasks(), 7);
        // subset chain with stable prefixes
        assert_eq!(mt3.indices_within(&mt5), Some(vec![0, 1, 2]));
        assert_eq!(mt5.indices_within(&mt7), Some(vec![0, 1, 2, 3, 4]));
        // the transfer novel set
        let novel: Vec<_> = mt5
            .task_names()
            .into_iter()
            .filter(|n| !mt3.task_names().contains(n))
            .collect();
        assert_eq!(novel, vec!["door_key", "multi_room"]);
        let mt7_names = mt7.task_names();
        for extra in ["dist_shift", "simple_crossing"] {
            assert!(mt7_names.contains(&extra));
        }
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(matches!(
            ScMdpSuite::make("grid_mt9", 0),
            Err(EnvError::UnknownSuite(_))
        ));
    }

    #[test]
    fn solo_suites_exist_for_every_task() {
        for name in ["grid_solo_dist_shift", "grid_solo_memory", "point_solo_reach"] {
            let s = ScMdpSuite::make(name, 1).unwrap();
            assert_eq!(s.n_tasks(), 1);
        }
    }

    #[test]
    fn context_ids_follow_registry_order() {
        let s = ScMdpSuite::make("grid_mt3", 0).unwrap();
        for i in 0..3 {
            let c = s.context(i).unwrap();
            assert_eq!(c.id, i);
            assert_eq!(c.onehot()[i], 1.0);
        }
    }

    #[test]
    fn observation_shapes_constant_across_suite() {
        let s = ScMdpSuite::make("point_mt10", 2).unwrap();
        for t in 0..s.n_tasks() {
            let mut env = s.make_env(t).unwrap();
            assert_eq!(env.reset(0).len(), POINT_OBS_DIM);
        }
        let g = ScMdpSuite::make("grid_mt7", 2).unwrap();
        for t in 0..g.n_tasks() {
            let mut env = g.make_env(t).unwrap();
            assert_eq!(env.reset(0).len(), 3 * 7 * 7);
        }
    }

    #[test]
    fn point_suites_default_ks_are_distinct_sizes() {
        assert_eq!(ScMdpSuite::make("point_mt4", 0).unwrap().n_tasks(), 4);
        assert_eq!(ScMdpSuite::make("point_mt10", 0).unwrap().n_tasks(), 10);
    }
}
