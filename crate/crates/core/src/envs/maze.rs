//! Point-mass navigation in ASCII grid mazes. The agent is a point with
//! position and velocity; each step applies bounded acceleration, damps the
//! velocity, and resolves wall contacts inelastically (the offending velocity
//! component is zeroed, the agent never enters a wall cell).

use super::{clamp_action, DelayedRewards, EnvSpec, RewardMode, StepOut};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::Real;
use rand::Rng;

/// Velocity carried over per step.
const DAMPING: Real = 0.9;
/// Acceleration per unit action.
const ACCEL: Real = 0.25;
/// Per-component speed cap, in cells per step. Kept below one substep-cell so
/// the collision walk can never tunnel through a wall.
const V_MAX: Real = 1.0;
const SUBSTEPS: usize = 2;
/// Distance at which the goal counts as reached.
const GOAL_RADIUS: Real = 0.5;
/// Reset scatters the start position uniformly within this box half-width.
const START_JITTER: Real = 0.3;

const OPEN: &str = "\
#######
#.....#
#S...G#
#.....#
#######";

// The wall row between start and goal blocks the straight line, so any
// successful run has to take the corridor around the right side. Long enough
// that a random walk rarely stumbles onto the goal within the episode cap.
const UMAZE: &str = "\
###########
#G........#
#########.#
#S........#
###########";

const MEDIUM: &str = "\
###########
#S........#
#########.#
#.........#
#.#########
#........G#
###########";

const LARGE: &str = "\
#############
#S..........#
###########.#
#...........#
#.###########
#...........#
###########.#
#...........#
#.###########
#..........G#
#############";

#[derive(Clone, Debug)]
pub struct Grid {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    start: (usize, usize),
    goal: (usize, usize),
}

impl Grid {
    pub fn parse(layout: &str) -> Result<Grid> {
        let lines: Vec<&str> = layout.lines().collect();
        let height = lines.len();
        let width = lines.first().map_or(0, |l| l.chars().count());
        if height < 3 || width < 3 {
            return Err(Error::BadLayout(format!("grid {width}x{height} too small")));
        }
        let mut walls = vec![false; width * height];
        let mut start = None;
        let mut goal = None;
        for (y, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::BadLayout(format!("ragged row {y}")));
            }
            for (x, c) in line.chars().enumerate() {
                match c {
                    '#' => walls[y * width + x] = true,
                    '.' | 'O' | ' ' => {}
                    'S' => {
                        if start.replace((x, y)).is_some() {
                            return Err(Error::BadLayout("multiple starts".into()));
                        }
                    }
                    'G' => {
                        if goal.replace((x, y)).is_some() {
                            return Err(Error::BadLayout("multiple goals".into()));
                        }
                    }
                    other => return Err(Error::BadLayout(format!("unknown cell '{other}'"))),
                }
            }
        }
        let start = start.ok_or_else(|| Error::BadLayout("no start cell".into()))?;
        let goal = goal.ok_or_else(|| Error::BadLayout("no goal cell".into()))?;
        let grid = Grid { width, height, walls, start, goal };
        if grid.is_wall_cell(start.0 as isize, start.1 as isize)
            || grid.is_wall_cell(goal.0 as isize, goal.1 as isize)
        {
            return Err(Error::BadLayout("start or goal inside a wall".into()));
        }
        Ok(grid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn goal_center(&self) -> [Real; 2] {
        [self.goal.0 as Real + 0.5, self.goal.1 as Real + 0.5]
    }

    pub fn start_center(&self) -> [Real; 2] {
        [self.start.0 as Real + 0.5, self.start.1 as Real + 0.5]
    }

    /// Out-of-range counts as wall, so the border never needs special cases.
    pub fn is_wall_cell(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return true;
        }
        self.walls[y as usize * self.width + x as usize]
    }

    pub fn is_wall_at(&self, pos: &[Real; 2]) -> bool {
        self.is_wall_cell(pos[0].floor() as isize, pos[1].floor() as isize)
    }

    /// Breadth-first distance-to-goal over free cells; usize::MAX where
    /// unreachable. Used by the scripted controller.
    pub fn distances_to_goal(&self) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let mut queue = std::collections::VecDeque::new();
        dist[self.goal.1 * self.width + self.goal.0] = 0;
        queue.push_back(self.goal);
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[y * self.width + x];
            for (dx, dy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if !self.is_wall_cell(nx, ny) {
                    let idx = ny as usize * self.width + nx as usize;
                    if dist[idx] == usize::MAX {
                        dist[idx] = d + 1;
                        queue.push_back((nx as usize, ny as usize));
                    }
                }
            }
        }
        dist
    }
}

#[derive(Clone, Debug)]
pub struct GridMaze {
    spec: EnvSpec,
    grid: Grid,
    controller: MazeController,
    pos: [Real; 2],
    vel: [Real; 2],
    steps: usize,
    finished: bool,
    at_goal: bool,
    delayed: DelayedRewards,
}

impl GridMaze {
    pub fn named(id: &str, mode: RewardMode) -> Result<GridMaze> {
        let (layout, max_steps) = match id {
            "open" => (OPEN, 50),
            "umaze" => (UMAZE, 150),
            "medium" => (MEDIUM, 250),
            "large" => (LARGE, 350),
            other => return Err(Error::UnknownEnv(other.to_string())),
        };
        Self::from_layout(id, layout, max_steps, mode)
    }

    pub fn from_layout(id: &str, layout: &str, max_steps: usize, mode: RewardMode) -> Result<GridMaze> {
        let grid = Grid::parse(layout)?;
        let spec = EnvSpec {
            id: id.to_string(),
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-1.0, -1.0],
            action_high: vec![1.0, 1.0],
            max_episode_steps: max_steps,
            reward_mode: mode,
        };
        let pos = grid.start_center();
        let controller = MazeController::new(&grid);
        Ok(GridMaze {
            spec,
            grid,
            controller,
            pos,
            vel: [0.0, 0.0],
            steps: 0,
            finished: false,
            at_goal: false,
            delayed: DelayedRewards::default(),
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn reached_goal(&self) -> bool {
        self.at_goal
    }

    fn observation(&self) -> Vec<Real> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Real> {
        let mut rng = stream_rng(seed, &format!("env/{}", self.spec.id));
        let start = self.grid.start_center();
        // Rejection-sample the jitter so the start never lands in a wall
        // (relevant only for starts adjacent to walls).
        loop {
            let dx: Real = rng.gen_range(-START_JITTER..=START_JITTER);
            let dy: Real = rng.gen_range(-START_JITTER..=START_JITTER);
            let pos = [start[0] + dx, start[1] + dy];
            if !self.grid.is_wall_at(&pos) {
                self.pos = pos;
                break;
            }
        }
        self.vel = [0.0, 0.0];
        self.steps = 0;
        self.finished = false;
        self.at_goal = false;
        self.delayed.reset();
        self.observation()
    }

    fn distance_to_goal(pos: &[Real; 2], goal: &[Real; 2]) -> Real {
        ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt()
    }

    /// Pure dynamics shared by `step` and the planning oracle:
    /// v' = damping * v + accel * a (per-component clamp), then an axis-wise
    /// collision walk in substeps. Returns (next_state, markov_reward, done).
    pub fn internal_step(&self, state: &[Real], action: &[Real]) -> (Vec<Real>, Real, bool) {
        let a = clamp_action(action, &self.spec.action_low, &self.spec.action_high);
        let mut pos = [state[0], state[1]];
        let mut vel = [state[2], state[3]];
        for axis in 0..2 {
            vel[axis] = (DAMPING * vel[axis] + ACCEL * a[axis]).clamp(-V_MAX, V_MAX);
        }
        for _ in 0..SUBSTEPS {
            for axis in 0..2 {
                let mut next = pos;
                next[axis] += vel[axis] / SUBSTEPS as Real;
                if self.grid.is_wall_at(&next) {
                    vel[axis] = 0.0;
                } else {
                    pos = next;
                }
            }
        }
        let goal = self.grid.goal_center();
        let dist = Self::distance_to_goal(&pos, &goal);
        let at_goal = dist <= GOAL_RADIUS;
        // Sparse episodes end on goal contact. Dense (and delayed, which is
        // dense paid in arrears) is a continuing task: the episode runs to
        // the step cap and the best policy parks on the goal, so "stay close"
        // and "finish fast" never conflict.
        let (reward, done) = match self.spec.reward_mode {
            RewardMode::Sparse => (if at_goal { 1.0 } else { 0.0 }, at_goal),
            RewardMode::Dense | RewardMode::Delayed => ((-dist).exp(), false),
        };
        (vec![pos[0], pos[1], vel[0], vel[1]], reward, done)
    }

    /// Whether a state counts as goal contact, independent of reward mode.
    pub fn state_reaches_goal(&self, state: &[Real]) -> bool {
        let goal = self.grid.goal_center();
        Self::distance_to_goal(&[state[0], state[1]], &goal) <= GOAL_RADIUS
    }

    /// Sparse episodes terminate on goal contact; dense/delayed run to the cap.
    pub fn terminates_at_goal(&self) -> bool {
        matches!(self.spec.reward_mode, RewardMode::Sparse)
    }

    pub fn step(&mut self, action: &[Real]) -> Result<StepOut> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        let state = self.observation();
        let (next, reward, terminal) = self.internal_step(&state, action);
        self.pos = [next[0], next[1]];
        self.vel = [next[2], next[3]];
        self.steps += 1;
        // Sticky: in continuing modes an episode counts as successful if the
        // goal was touched at any point.
        self.at_goal = self.at_goal || self.state_reaches_goal(&next);
        let done = terminal || self.steps >= self.spec.max_episode_steps;
        self.finished = done;
        let reward = match self.spec.reward_mode {
            RewardMode::Delayed => self.delayed.transform(reward, done),
            _ => reward,
        };
        Ok(StepOut { obs: self.observation(), reward, done })
    }

    pub fn internal_bounds(&self) -> Vec<(Real, Real)> {
        vec![
            (0.0, self.grid.width as Real),
            (0.0, self.grid.height as Real),
            (-V_MAX, V_MAX),
            (-V_MAX, V_MAX),
        ]
    }

    pub fn internal_start(&self) -> Vec<Real> {
        let c = self.grid.start_center();
        vec![c[0], c[1], 0.0, 0.0]
    }

    pub fn scripted_action(&self) -> Vec<Real> {
        self.controller.action(&self.grid, self.pos, self.vel)
    }
}

/// Waypoint-following PD controller over the BFS distance field. It aims at
/// the center of the best neighboring cell (or the goal itself once
/// adjacent) and brakes against its own velocity.
#[derive(Clone, Debug)]
pub struct MazeController {
    dist: Vec<usize>,
}

impl MazeController {
    pub fn new(grid: &Grid) -> Self {
        Self { dist: grid.distances_to_goal() }
    }

    pub fn action(&self, grid: &Grid, pos: [Real; 2], vel: [Real; 2]) -> Vec<Real> {
        let (cx, cy) = (pos[0].floor() as isize, pos[1].floor() as isize);
        let here = self.cell_dist(grid, cx, cy);
        let mut target = grid.goal_center();
        if here > 1 {
            // Move toward the neighboring cell closest to the goal.
            let mut best = here;
            for (dx, dy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                let d = self.cell_dist(grid, cx + dx, cy + dy);
                if d < best {
                    best = d;
                    target = [(cx + dx) as Real + 0.5, (cy + dy) as Real + 0.5];
                }
            }
        }
        let kp = 2.0;
        let kd = 1.2;
        vec![
            (kp * (target[0] - pos[0]) - kd * vel[0]).clamp(-1.0, 1.0),
            (kp * (target[1] - pos[1]) - kd * vel[1]).clamp(-1.0, 1.0),
        ]
    }

    fn cell_dist(&self, grid: &Grid, x: isize, y: isize) -> usize {
        if grid.is_wall_cell(x, y) {
            usize::MAX
        } else {
            self.dist[y as usize * grid.width() + x as usize]
        }
    }
}
