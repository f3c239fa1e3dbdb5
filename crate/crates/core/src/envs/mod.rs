//! Deterministic toy control environments sized for CPU experiments: grid
//! mazes with double-integrator dynamics, a 1-D corridor, and random tabular
//! MDPs for exercising the planning oracle. Transitions are pure functions of
//! (state, action); the only randomness is the seeded reset jitter.

pub mod chain;
pub mod maze;
pub mod tabular;

use crate::error::{Error, Result};
use crate::Real;

pub use chain::ChainEnv;
pub use maze::{GridMaze, MazeController};
pub use tabular::{make_random_mdp, TabularMdp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    /// 1 on reaching the goal, 0 elsewhere.
    Sparse,
    /// Shaped per-step reward (distance-based in the maze, progress in the
    /// corridor).
    Dense,
    /// Dense rewards accumulated silently and paid in full on the final step
    /// (goal or timeout), so totals match dense mode for identical actions.
    Delayed,
}

impl RewardMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(RewardMode::Sparse),
            "dense" => Ok(RewardMode::Dense),
            "delayed" => Ok(RewardMode::Delayed),
            other => Err(Error::Config(format!("unknown reward mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardMode::Sparse => "sparse",
            RewardMode::Dense => "dense",
            RewardMode::Delayed => "delayed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub id: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<Real>,
    pub action_high: Vec<Real>,
    pub max_episode_steps: usize,
    pub reward_mode: RewardMode,
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub obs: Vec<Real>,
    pub reward: Real,
    pub done: bool,
}

/// Folds per-step rewards into a single payout on the final step.
#[derive(Clone, Debug, Default)]
pub struct DelayedRewards {
    acc: Real,
}

impl DelayedRewards {
    pub fn reset(&mut self) {
        self.acc = 0.0;
    }

    /// Feed the would-be per-step reward; emits 0 until `done`, then the
    /// accumulated total (including the final step's reward).
    pub fn transform(&mut self, reward: Real, done: bool) -> Real {
        self.acc += reward;
        if done {
            std::mem::take(&mut self.acc)
        } else {
            0.0
        }
    }
}

/// The environment zoo behind string ids. An enum rather than trait objects:
/// there are exactly two families and the match sites read better.
#[derive(Clone, Debug)]
pub enum ToyEnv {
    Maze(GridMaze),
    Chain(ChainEnv),
}

impl ToyEnv {
    /// Ids: `open`, `umaze`, `medium`, `large` (mazes) and `chain` or
    /// `chain-N` for a corridor of length N.
    pub fn make(id: &str, mode: RewardMode) -> Result<ToyEnv> {
        match id {
            "open" | "umaze" | "medium" | "large" => {
                Ok(ToyEnv::Maze(GridMaze::named(id, mode)?))
            }
            "chain" => Ok(ToyEnv::Chain(ChainEnv::new(12.0, mode))),
            other => {
                if let Some(n) = other.strip_prefix("chain-") {
                    let len: usize = n
                        .parse()
                        .map_err(|_| Error::UnknownEnv(other.to_string()))?;
                    Ok(ToyEnv::Chain(ChainEnv::new(len as Real, mode)))
                } else {
                    Err(Error::UnknownEnv(other.to_string()))
                }
            }
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            ToyEnv::Maze(m) => m.spec(),
            ToyEnv::Chain(c) => c.spec(),
        }
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Real> {
        match self {
            ToyEnv::Maze(m) => m.reset(seed),
            ToyEnv::Chain(c) => c.reset(seed),
        }
    }

    pub fn step(&mut self, action: &[Real]) -> Result<StepOut> {
        match self {
            ToyEnv::Maze(m) => m.step(action),
            ToyEnv::Chain(c) => c.step(action),
        }
    }

    /// Whether the last step ended at the goal (as opposed to a timeout).
    pub fn reached_goal(&self) -> bool {
        match self {
            ToyEnv::Maze(m) => m.reached_goal(),
            ToyEnv::Chain(c) => c.reached_goal(),
        }
    }

    // ---- planner-facing access to the underlying Markov dynamics ----
    // Observations may hide part of the state (the corridor shows position
    // only); the oracle plans on the full internal state.

    pub fn internal_dim(&self) -> usize {
        match self {
            ToyEnv::Maze(_) => 4,
            ToyEnv::Chain(_) => 2,
        }
    }

    pub fn internal_bounds(&self) -> Vec<(Real, Real)> {
        match self {
            ToyEnv::Maze(m) => m.internal_bounds(),
            ToyEnv::Chain(c) => c.internal_bounds(),
        }
    }

    /// Canonical start state (no reset jitter).
    pub fn internal_start(&self) -> Vec<Real> {
        match self {
            ToyEnv::Maze(m) => m.internal_start(),
            ToyEnv::Chain(c) => c.internal_start(),
        }
    }

    /// Pure transition from an arbitrary internal state. The reward is the
    /// per-step Markov reward for the active mode; delayed mode plans with
    /// its dense equivalent (totals agree by construction).
    pub fn internal_step(&self, state: &[Real], action: &[Real]) -> (Vec<Real>, Real, bool) {
        match self {
            ToyEnv::Maze(m) => m.internal_step(state, action),
            ToyEnv::Chain(c) => c.internal_step(state, action),
        }
    }

    pub fn observe_internal(&self, state: &[Real]) -> Vec<Real> {
        match self {
            ToyEnv::Maze(_) => state.to_vec(),
            ToyEnv::Chain(_) => vec![state[0]],
        }
    }

    /// Goal contact for an arbitrary internal state, independent of mode.
    pub fn state_reaches_goal(&self, state: &[Real]) -> bool {
        match self {
            ToyEnv::Maze(m) => m.state_reaches_goal(state),
            ToyEnv::Chain(c) => c.state_reaches_goal(state),
        }
    }

    /// Whether goal contact ends the episode (sparse mazes, every corridor
    /// mode) or the episode always runs to the step cap (dense/delayed mazes).
    pub fn terminates_at_goal(&self) -> bool {
        match self {
            ToyEnv::Maze(m) => m.terminates_at_goal(),
            ToyEnv::Chain(c) => c.terminates_at_goal(),
        }
    }

    /// A reasonable hand-scripted action toward the goal, used by the
    /// behavior policies that generate offline datasets.
    pub fn scripted_action(&self) -> Vec<Real> {
        match self {
            ToyEnv::Maze(m) => m.scripted_action(),
            ToyEnv::Chain(c) => c.scripted_action(),
        }
    }
}

pub(crate) fn clamp_action(action: &[Real], low: &[Real], high: &[Real]) -> Vec<Real> {
    action
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
        .collect()
}
