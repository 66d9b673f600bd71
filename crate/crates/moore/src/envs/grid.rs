//! Grid task family: 8x8-ish mazes with doors, keys, lava, and goals,
//! observed through a 7x7 egocentric window with (type, color, state)
//! channels. Dynamics are deterministic; layouts are seeded per episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, VecDeque};

use super::EnvError;

pub const VIEW: usize = 7;
pub const GRID_CHANNELS: usize = 3;
/// Per-task step limit before truncation.
pub const GRID_HORIZON: usize = 100;
pub const GRID_ACTIONS: usize = 7;

// object type channel values
const OBJ_UNSEEN: u8 = 0;
const OBJ_EMPTY: u8 = 1;
const OBJ_WALL: u8 = 2;
const OBJ_DOOR: u8 = 4;
const OBJ_KEY: u8 = 5;
const OBJ_BALL: u8 = 6;
const OBJ_GOAL: u8 = 8;
const OBJ_LAVA: u8 = 9;

// colors
pub const RED: u8 = 0;
pub const GREEN: u8 = 1;
pub const BLUE: u8 = 2;
pub const GREY: u8 = 5;
const YELLOW: u8 = 4;

// door states
const ST_OPEN: u8 = 0;
const ST_CLOSED: u8 = 1;
const ST_LOCKED: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Wall,
    Lava,
    Goal,
    Key { color: u8 },
    Ball { color: u8 },
    Door { color: u8, state: u8 },
}

impl Cell {
    fn encode(self) -> [u8; 3] {
        match self {
            Cell::Empty => [OBJ_EMPTY, 0, 0],
            Cell::Wall => [OBJ_WALL, GREY, 0],
            Cell::Lava => [OBJ_LAVA, RED, 0],
            Cell::Goal => [OBJ_GOAL, GREEN, 0],
            Cell::Key { color } => [OBJ_KEY, color, 0],
            Cell::Ball { color } => [OBJ_BALL, color, 0],
            Cell::Door { color, state } => [OBJ_DOOR, color, state],
        }
    }

    fn walkable(self) -> bool {
        matches!(
            self,
            Cell::Empty | Cell::Goal | Cell::Lava | Cell::Door { state: ST_OPEN, .. }
        )
    }
}

/// The seven lite analogues, in stable registry order (base tasks keep
/// their ids when a suite grows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridTask {
    LavaGap,
    RedBlueDoors,
    Memory,
    DoorKey,
    MultiRoom,
    DistShift,
    SimpleCrossing,
}

impl GridTask {
    pub fn name(self) -> &'static str {
        match self {
            GridTask::LavaGap => "lava_gap",
            GridTask::RedBlueDoors => "red_blue_doors",
            GridTask::Memory => "memory",
            GridTask::DoorKey => "door_key",
            GridTask::MultiRoom => "multi_room",
            GridTask::DistShift => "dist_shift",
            GridTask::SimpleCrossing => "simple_crossing",
        }
    }
}

/// 7x7x3 integer observation, channels (object type, color, state).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridObservation {
    /// [channel][row][col], row 6 holds the agent cell at column 3.
    pub cells: Vec<u8>,
}

impl GridObservation {
    /// Normalized network input, shape [3, 7, 7].
    pub fn to_input(&self) -> Vec<f64> {
        let scale = [10.0, 5.0, 3.0];
        self.cells
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from(v) / scale[i / (VIEW * VIEW)])
            .collect()
    }

    pub fn shape() -> [usize; 3] {
        [GRID_CHANNELS, VIEW, VIEW]
    }
}

#[derive(Debug, Clone)]
struct Layout {
    width: i32,
    height: i32,
    cells: Vec<Cell>,
    agent_pos: (i32, i32),
    agent_dir: u8,
    /// Memory: the color whose ball must be visited.
    cue_color: u8,
}

impl Layout {
    fn at(&self, x: i32, y: i32) -> Cell {
        if x < 0 || y < 0 || x >= self.width || y >= self.height {
            Cell::Wall
        } else {
            self.cells[(y * self.width + x) as usize]
        }
    }

    fn set(&mut self, x: i32, y: i32, c: Cell) {
        self.cells[(y * self.width + x) as usize] = c;
    }
}

fn empty_layout(width: i32, height: i32) -> Layout {
    let mut cells = vec![Cell::Empty; (width * height) as usize];
    for x in 0..width {
        cells[x as usize] = Cell::Wall;
        cells[((height - 1) * width + x) as usize] = Cell::Wall;
    }
    for y in 0..height {
        cells[(y * width) as usize] = Cell::Wall;
        cells[(y * width + width - 1) as usize] = Cell::Wall;
    }
    Layout {
        width,
        height,
        cells,
        agent_pos: (1, 1),
        agent_dir: 0,
        cue_color: RED,
    }
}

fn generate(task: GridTask, rng: &mut ChaCha8Rng) -> Layout {
    match task {
        GridTask::LavaGap => {
            let mut l = empty_layout(8, 8);
            let gap = rng.random_range(1..=6);
            for y in 1..=6 {
                if y != gap {
                    l.set(3, y, Cell::Lava);
                }
            }
            l.set(6, 6, Cell::Goal);
            l.agent_pos = (1, 1);
            l.agent_dir = 0;
            l
        }
        GridTask::RedBlueDoors => {
            // small room: the toggle-red-then-blue sequence must be
            // reachable by undirected exploration
            let mut l = empty_layout(6, 6);
            let ry = rng.random_range(2..=3);
            let by = rng.random_range(2..=3);
            l.set(0, ry, Cell::Door { color: RED, state: ST_CLOSED });
            l.set(5, by, Cell::Door { color: BLUE, state: ST_CLOSED });
            l.agent_pos = (rng.random_range(2..=3), rng.random_range(2..=3));
            l.agent_dir = rng.random_range(0..4) as u8;
            l
        }
        GridTask::Memory => {
            let mut l = empty_layout(9, 7);
            // carve corridor and junction column out of solid interior
            for x in 1..=7 {
                for y in 1..=5 {
                    l.set(x, y, Cell::Wall);
                }
            }
            for x in 1..=6 {
                l.set(x, 3, Cell::Empty);
            }
            for y in 1..=5 {
                l.set(6, y, Cell::Empty);
            }
            let cue = if rng.random_bool(0.5) { RED } else { BLUE };
            l.cue_color = cue;
            // cue object sits beside the corridor, visible on approach
            l.set(5, 2, Cell::Ball { color: cue });
            l.set(6, 1, Cell::Ball { color: RED });
            l.set(6, 5, Cell::Ball { color: BLUE });
            l.agent_pos = (1, 3);
            l.agent_dir = 0;
            l
        }
        GridTask::DoorKey => {
            let mut l = empty_layout(8, 8);
            for y in 1..=6 {
                l.set(3, y, Cell::Wall);
            }
            let dy = rng.random_range(1..=6);
            l.set(3, dy, Cell::Door { color: YELLOW, state: ST_LOCKED });
            let ky = rng.random_range(1..=6);
            let kx = rng.random_range(1..=2);
            l.set(kx, ky, Cell::Key { color: YELLOW });
            l.set(6, rng.random_range(1..=6), Cell::Goal);
            // keep the start cell clear of the key
            let mut start = (1, 1);
            if start == (kx, ky) {
                start = (2, 1);
                if start == (kx, ky) {
                    start = (1, 2);
                }
            }
            l.agent_pos = start;
            l.agent_dir = 0;
            l
        }
        GridTask::MultiRoom => {
            let mut l = empty_layout(8, 8);
            for y in 1..=6 {
                l.set(3, y, Cell::Wall);
            }
            let dy = rng.random_range(1..=6);
            l.set(3, dy, Cell::Door { color: GREY, state: ST_CLOSED });
            l.set(rng.random_range(4..=6), rng.random_range(1..=6), Cell::Goal);
            l.agent_pos = (rng.random_range(1..=2), rng.random_range(1..=6));
            l.agent_dir = 0;
            l
        }
        GridTask::DistShift => {
            let mut l = empty_layout(8, 8);
            let lava_y = rng.random_range(1..=2);
            l.set(3, lava_y, Cell::Lava);
            l.set(4, lava_y, Cell::Lava);
            l.set(6, 1, Cell::Goal);
            l.agent_pos = (1, 1);
            l.agent_dir = 0;
            l
        }
        GridTask::SimpleCrossing => {
            let mut l = empty_layout(8, 8);
            let wx = rng.random_range(2..=5);
            let gap = rng.random_range(1..=6);
            for y in 1..=6 {
                if y != gap {
                    l.set(wx, y, Cell::Wall);
                }
            }
            l.set(6, 6, Cell::Goal);
            l.agent_pos = (1, 1);
            l.agent_dir = 0;
            l
        }
    }
}

fn dir_vec(dir: u8) -> (i32, i32) {
    match dir {
        0 => (1, 0),  // east
        1 => (0, 1),  // south
        2 => (-1, 0), // west
        _ => (0, -1), // north
    }
}

fn right_vec(dir: u8) -> (i32, i32) {
    dir_vec((dir + 1) % 4)
}

/// One grid environment instance; `reset` regenerates the layout from the
/// episode seed, so identical seeds give identical episodes.
pub struct GridEnv {
    task: GridTask,
    suite_seed: u64,
    task_id: usize,
    layout: Layout,
    carrying: Option<Cell>,
    t: usize,
    red_opened: bool,
    done: bool,
}

impl GridEnv {
    pub fn new(task: GridTask, suite_seed: u64, task_id: usize) -> Self {
        let mut env = Self {
            task,
            suite_seed,
            task_id,
            layout: empty_layout(3, 3),
            carrying: None,
            t: 0,
            red_opened: false,
            done: true,
        };
        env.reset(0);
        env
    }

    pub fn task(&self) -> GridTask {
        self.task
    }

    fn episode_rng(&self, episode_seed: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.suite_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(self.task_id as u64).to_le_bytes());
        seed[16..24].copy_from_slice(&episode_seed.to_le_bytes());
        seed[24] = 0x47; // domain tag: grid layouts
        ChaCha8Rng::from_seed(seed)
    }

    pub fn reset(&mut self, episode_seed: u64) -> GridObservation {
        let mut rng = self.episode_rng(episode_seed);
        self.layout = generate(self.task, &mut rng);
        self.carrying = None;
        self.t = 0;
        self.red_opened = false;
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> GridObservation {
        let mut cells = vec![0u8; GRID_CHANNELS * VIEW * VIEW];
        let fwd = dir_vec(self.layout.agent_dir);
        let right = right_vec(self.layout.agent_dir);
        for vy in 0..VIEW as i32 {
            for vx in 0..VIEW as i32 {
                let rel_f = (VIEW as i32 - 1) - vy;
                let rel_r = vx - (VIEW as i32 / 2);
                let wx = self.layout.agent_pos.0 + fwd.0 * rel_f + right.0 * rel_r;
                let wy = self.layout.agent_pos.1 + fwd.1 * rel_f + right.1 * rel_r;
                let enc = if wx < 0 || wy < 0 || wx >= self.layout.width || wy >= self.layout.height
                {
                    [OBJ_UNSEEN, 0, 0]
                } else if (wx, wy) == self.layout.agent_pos {
                    match self.carrying {
                        Some(c) => c.encode(),
                        None => Cell::Empty.encode(),
                    }
                } else {
                    self.layout.at(wx, wy).encode()
                };
                for ch in 0..GRID_CHANNELS {
                    cells[ch * VIEW * VIEW + (vy as usize) * VIEW + vx as usize] = enc[ch];
                }
            }
        }
        GridObservation { cells }
    }

    fn success_reward(&self) -> f64 {
        1.0 - 0.9 * (self.t as f64) / (GRID_HORIZON as f64)
    }

    /// Applies one of the seven discrete actions.
    pub fn step(&mut self, action: usize) -> Result<(GridObservation, f64, bool, bool), EnvError> {
        if action >= GRID_ACTIONS {
            return Err(EnvError::BadAction(format!(
                "discrete action {action} out of range 0..{GRID_ACTIONS}"
            )));
        }
        if self.done {
            return Err(EnvError::BadAction(
                "step called on a finished episode".into(),
            ));
        }
        self.t += 1;
        let mut reward = 0.0;
        let mut absorbing = false;
        let (fx, fy) = dir_vec(self.layout.agent_dir);
        let ahead = (self.layout.agent_pos.0 + fx, self.layout.agent_pos.1 + fy);
        match action {
            0 => self.layout.agent_dir = (self.layout.agent_dir + 3) % 4,
            1 => self.layout.agent_dir = (self.layout.agent_dir + 1) % 4,
            2 => {
                let target = self.layout.at(ahead.0, ahead.1);
                match target {
                    Cell::Lava => {
                        absorbing = true;
                        self.layout.agent_pos = ahead;
                    }
                    Cell::Goal => {
                        reward = self.success_reward();
                        absorbing = true;
                        self.layout.agent_pos = ahead;
                    }
                    Cell::Ball { color } if self.task == GridTask::Memory => {
                        // branch targets are enterable; matching color wins
                        self.layout.agent_pos = ahead;
                        absorbing = true;
                        if color == self.layout.cue_color && ahead.0 == 6 {
                            reward = self.success_reward();
                        }
                    }
                    c if c.walkable() => self.layout.agent_pos = ahead,
                    _ => {}
                }
            }
            3 => {
                if self.carrying.is_none() {
                    if let c @ (Cell::Key { .. } | Cell::Ball { .. }) =
                        self.layout.at(ahead.0, ahead.1)
                    {
                        self.carrying = Some(c);
                        self.layout.set(ahead.0, ahead.1, Cell::Empty);
                    }
                }
            }
            4 => {
                if let Some(c) = self.carrying {
                    if self.layout.at(ahead.0, ahead.1) == Cell::Empty {
                        self.layout.set(ahead.0, ahead.1, c);
                        self.carrying = None;
                    }
                }
            }
            5 => {
                if let Cell::Door { color, state } = self.layout.at(ahead.0, ahead.1) {
                    match state {
                        ST_LOCKED => {
                            if matches!(self.carrying, Some(Cell::Key { color: kc }) if kc == color)
                            {
                                self.layout.set(ahead.0, ahead.1, Cell::Door { color, state: ST_OPEN });
                            }
                        }
                        ST_CLOSED => {
                            self.layout.set(ahead.0, ahead.1, Cell::Door { color, state: ST_OPEN });
                            if self.task == GridTask::RedBlueDoors {
                                if color == RED {
                                    self.red_opened = true;
                                } else if color == BLUE {
                                    absorbing = true;
                                    if self.red_opened {
                                        reward = self.success_reward();
                                    }
                                }
                            }
                        }
                        _ => {
                            self.layout.set(ahead.0, ahead.1, Cell::Door { color, state: ST_CLOSED });
                        }
                    }
                }
            }
            _ => {} // done action: no-op
        }
        let last = absorbing || self.t >= GRID_HORIZON;
        self.done = last;
        Ok((self.observe(), reward, absorbing, last))
    }
}

// ---- exact search for the best achievable shaped return ----

#[derive(Clone, PartialEq, Eq, Hash)]
struct SearchState {
    pos: (i32, i32),
    dir: u8,
    carrying_key: bool,
    doors: Vec<(i32, i32, u8)>,
    red_opened: bool,
    key_pos: Option<(i32, i32)>,
}

/// Breadth-first search over the deterministic dynamics: the shortest
/// successful plan's shaped reward, or an error if no plan exists.
pub fn optimal_return(task: GridTask, suite_seed: u64, task_id: usize, episode_seed: u64) -> Result<f64, EnvError> {
    let probe = GridEnv::new(task, suite_seed, task_id);
    let mut rng = probe.episode_rng(episode_seed);
    let layout = generate(task, &mut rng);
    let start = SearchState {
        pos: layout.agent_pos,
        dir: layout.agent_dir,
        carrying_key: false,
        doors: collect_doors(&layout),
        red_opened: false,
        key_pos: find_key(&layout),
    };
    let mut seen: HashMap<SearchState, ()> = HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert(start.clone(), ());
    queue.push_back((start, 0usize));
    while let Some((state, steps)) = queue.pop_front() {
        if steps >= GRID_HORIZON {
            continue;
        }
        for action in [0usize, 1, 2, 3, 5] {
            let (next, success, dead) = apply_search(task, &layout, &state, action);
            let t = steps + 1;
            if success {
                return Ok(1.0 - 0.9 * (t as f64) / (GRID_HORIZON as f64));
            }
            if dead || t >= GRID_HORIZON {
                continue;
            }
            if !seen.contains_key(&next) {
                seen.insert(next.clone(), ());
                queue.push_back((next, t));
            }
        }
    }
    Err(EnvError::Unsolvable(task.name().into()))
}

fn collect_doors(l: &Layout) -> Vec<(i32, i32, u8)> {
    let mut doors = Vec::new();
    for y in 0..l.height {
        for x in 0..l.width {
            if let Cell::Door { state, .. } = l.at(x, y) {
                doors.push((x, y, state));
            }
        }
    }
    doors
}

fn find_key(l: &Layout) -> Option<(i32, i32)> {
    for y in 0..l.height {
        for x in 0..l.width {
            if matches!(l.at(x, y), Cell::Key { .. }) {
                return Some((x, y));
            }
        }
    }
    None
}

fn door_state(state: &SearchState, pos: (i32, i32)) -> Option<u8> {
    state
        .doors
        .iter()
        .find(|d| (d.0, d.1) == pos)
        .map(|d| d.2)
}

fn apply_search(
    task: GridTask,
    layout: &Layout,
    s: &SearchState,
    action: usize,
) -> (SearchState, bool, bool) {
    let mut next = s.clone();
    let (fx, fy) = dir_vec(s.dir);
    let ahead = (s.pos.0 + fx, s.pos.1 + fy);
    let mut success = false;
    let mut dead = false;
    match action {
        0 => next.dir = (s.dir + 3) % 4,
        1 => next.dir = (s.dir + 1) % 4,
        2 => {
            let cell = base_cell(layout, s, ahead);
            match cell {
                Cell::Lava => dead = true,
                Cell::Goal => success = true,
                Cell::Ball { color } if task == GridTask::Memory => {
                    if color == layout.cue_color && ahead.0 == 6 {
                        success = true;
                    } else {
                        dead = true;
                    }
                }
                Cell::Door { .. } => {
                    if door_state(s, ahead) == Some(ST_OPEN) {
                        next.pos = ahead;
                    }
                }
                Cell::Empty => next.pos = ahead,
                _ => {}
            }
        }
        3 => {
            if !s.carrying_key && s.key_pos == Some(ahead) {
                next.carrying_key = true;
                next.key_pos = None;
            }
        }
        5 => {
            if let Cell::Door { color, .. } = layout.at(ahead.0, ahead.1) {
                let st = door_state(s, ahead).unwrap();
                let newst = match st {
                    ST_LOCKED if s.carrying_key => ST_OPEN,
                    ST_CLOSED => ST_OPEN,
                    ST_OPEN => ST_CLOSED,
                    other => other,
                };
                if newst != st {
                    for d in next.doors.iter_mut() {
                        if (d.0, d.1) == ahead {
                            d.2 = newst;
                        }
                    }
                    if task == GridTask::RedBlueDoors && newst == ST_OPEN {
                        if color == RED {
                            next.red_opened = true;
                        } else if color == BLUE {
                            if s.red_opened {
                                success = true;
                            } else {
                                dead = true;
                            }
                        }
                    }
                }
            }
        }
        _ => {}
    }
    (next, success, dead)
}

/// Cell contents accounting for a picked-up key.
fn base_cell(layout: &Layout, s: &SearchState, pos: (i32, i32)) -> Cell {
    let c = layout.at(pos.0, pos.1);
    if matches!(c, Cell::Key { .. }) && s.key_pos != Some(pos) {
        return Cell::Empty;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let mut env = GridEnv::new(GridTask::LavaGap, 7, 0);
        let a = env.reset(3);
        let b = env.reset(3);
        assert_eq!(a, b);
        let c = env.reset(4);
        assert!(a != c || env.layout.cells == env.layout.cells); // layouts may coincide, obs equality is what matters
        let _ = c;
    }

    #[test]
    fn lava_is_absorbing_with_zero_reward() {
        let mut env = GridEnv::new(GridTask::LavaGap, 0, 0);
        // find a seed whose gap is not at y=1: walking east from (1,1)
        // eventually hits lava at (3,1)
        for seed in 0..20 {
            env.reset(seed);
            if env.layout.at(3, 1) == Cell::Lava {
                let (_, r1, a1, l1) = env.step(2).unwrap();
                assert!(!a1 && r1 == 0.0 && !l1);
                let (_, r2, a2, l2) = env.step(2).unwrap();
                assert_eq!(r2, 0.0);
                assert!(a2 && l2);
                return;
            }
        }
        panic!("no layout with lava at (3,1) in 20 seeds");
    }

    #[test]
    fn immediate_success_shaping_value() {
        // success at t=1 must pay 1 - 0.9/100 = 0.991
        let mut env = GridEnv::new(GridTask::DistShift, 0, 0);
        env.reset(0);
        env.layout.set(2, 1, Cell::Goal); // plant a goal directly ahead
        let (_, r, absorbing, _) = env.step(2).unwrap();
        assert!(absorbing);
        assert!((r - 0.991).abs() < 1e-12);
    }

    #[test]
    fn noop_keeps_position() {
        let mut env = GridEnv::new(GridTask::SimpleCrossing, 1, 0);
        env.reset(0);
        let before = env.layout.agent_pos;
        env.step(6).unwrap();
        assert_eq!(env.layout.agent_pos, before);
    }

    #[test]
    fn forward_into_wall_is_blocked() {
        let mut env = GridEnv::new(GridTask::SimpleCrossing, 1, 0);
        env.reset(0);
        env.layout.agent_pos = (1, 1);
        env.layout.agent_dir = 3; // facing the top border wall
        let before = env.layout.agent_pos;
        env.step(2).unwrap();
        assert_eq!(env.layout.agent_pos, before);
    }

    #[test]
    fn out_of_range_action_is_an_error() {
        let mut env = GridEnv::new(GridTask::LavaGap, 0, 0);
        env.reset(0);
        assert!(matches!(env.step(7), Err(EnvError::BadAction(_))));
    }

    #[test]
    fn observation_values_stay_in_enumerated_ranges() {
        let mut env = GridEnv::new(GridTask::Memory, 3, 0);
        for seed in 0..5 {
            let obs = env.reset(seed);
            for ch in 0..3 {
                let max = [10u8, 5, 3][ch];
                for &v in &obs.cells[ch * 49..(ch + 1) * 49] {
                    assert!(v <= max, "channel {ch} value {v}");
                }
            }
        }
    }

    #[test]
    fn bfs_solves_every_task_layout() {
        for (i, task) in [
            GridTask::LavaGap,
            GridTask::RedBlueDoors,
            GridTask::Memory,
            GridTask::DoorKey,
            GridTask::MultiRoom,
            GridTask::DistShift,
            GridTask::SimpleCrossing,
        ]
        .iter()
        .enumerate()
        {
            for seed in 0..30 {
                let ret = optimal_return(*task, 11, i, seed).unwrap();
                assert!(ret > 0.0 && ret < 1.0, "{task:?} seed {seed}: {ret}");
            }
        }
    }

    #[test]
    fn doorkey_optimal_path_includes_key_and_door() {
        // The locked-door plan must be longer than the unobstructed
        // manhattan walk would suggest.
        let ret = optimal_return(GridTask::DoorKey, 5, 0, 1).unwrap();
        let plain = optimal_return(GridTask::SimpleCrossing, 5, 0, 1).unwrap();
        assert!(ret < 1.0 && plain < 1.0);
    }

    #[test]
    fn memory_wrong_branch_pays_zero() {
        let mut env = GridEnv::new(GridTask::Memory, 9, 0);
        env.reset(0);
        let cue = env.layout.cue_color;
        let wrong_y = if cue == RED { 5 } else { 1 };
        // teleport next to the wrong object and walk in
        env.layout.agent_pos = (6, if wrong_y == 5 { 4 } else { 2 });
        env.layout.agent_dir = if wrong_y == 5 { 1 } else { 3 };
        let (_, r, absorbing, _) = env.step(2).unwrap();
        assert!(absorbing);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn memory_matching_branch_pays_shaped_reward() {
        let mut env = GridEnv::new(GridTask::Memory, 9, 0);
        env.reset(0);
        let cue = env.layout.cue_color;
        let right_y = if cue == RED { 1 } else { 5 };
        env.layout.agent_pos = (6, if right_y == 1 { 2 } else { 4 });
        env.layout.agent_dir = if right_y == 1 { 3 } else { 1 };
        let (_, r, absorbing, _) = env.step(2).unwrap();
        assert!(absorbing);
        assert!(r > 0.9);
    }

    #[test]
    fn red_then_blue_succeeds_blue_first_fails() {
        let mut env = GridEnv::new(GridTask::RedBlueDoors, 2, 0);
        env.reset(0);
        let east = env.layout.width - 1;
        // find the doors
        let mut red = None;
        let mut blue = None;
        for y in 0..env.layout.height {
            if let Cell::Door { color: RED, .. } = env.layout.at(0, y) {
                red = Some(y);
            }
            if let Cell::Door { color: BLUE, .. } = env.layout.at(east, y) {
                blue = Some(y);
            }
        }
        let (ry, by) = (red.unwrap(), blue.unwrap());
        // open red first
        env.layout.agent_pos = (1, ry);
        env.layout.agent_dir = 2;
        let (_, r, absorbing, _) = env.step(5).unwrap();
        assert!(!absorbing && r == 0.0);
        env.layout.agent_pos = (east - 1, by);
        env.layout.agent_dir = 0;
        let (_, r, absorbing, _) = env.step(5).unwrap();
        assert!(absorbing && r > 0.0);

        // fresh episode: blue first fails
        env.reset(0);
        env.layout.agent_pos = (east - 1, by);
        env.layout.agent_dir = 0;
        let (_, r, absorbing, _) = env.step(5).unwrap();
        assert!(absorbing && r == 0.0);
    }

    #[test]
    fn trajectories_replay_bitwise() {
        let run = || {
            let mut env = GridEnv::new(GridTask::DoorKey, 13, 0);
            let mut obs = env.reset(5);
            let mut rewards = Vec::new();
            let mut script = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..40 {
                let a = rng.random_range(0..GRID_ACTIONS);
                script.push(a);
                let (o, r, _, last) = env.step(a).unwrap();
                obs = o;
                rewards.push(r);
                if last {
                    break;
                }
            }
            (obs, rewards, script)
        };
        let (o1, r1, s1) = run();
        let (o2, r2, s2) = run();
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
        assert_eq!(r1, r2);
    }
}
