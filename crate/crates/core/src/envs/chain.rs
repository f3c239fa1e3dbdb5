//! A 1-D corridor with momentum. The agent accelerates left/right and is done
//! once it passes the far end. Observations expose position only, so velocity
//! has to be inferred from history; dense mode pays per-step progress, which
//! telescopes to (final - start) position over an episode.

use super::{clamp_action, DelayedRewards, EnvSpec, RewardMode, StepOut};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::Real;
use rand::Rng;

const DAMPING: Real = 0.9;
const ACCEL: Real = 0.5;
const V_MAX: Real = 1.5;
const START_JITTER: Real = 0.1;

#[derive(Clone, Debug)]
pub struct ChainEnv {
    spec: EnvSpec,
    length: Real,
    x: Real,
    v: Real,
    steps: usize,
    finished: bool,
    at_goal: bool,
    delayed: DelayedRewards,
}

impl ChainEnv {
    pub fn new(length: Real, mode: RewardMode) -> ChainEnv {
        assert!(length > 0.0);
        let spec = EnvSpec {
            id: format!("chain-{}", length as usize),
            state_dim: 1,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            // Enough slack for hesitant policies, short enough that a random
            // walk usually times out.
            max_episode_steps: (length * 4.0) as usize,
            reward_mode: mode,
        };
        ChainEnv {
            spec,
            length,
            x: 0.0,
            v: 0.0,
            steps: 0,
            finished: false,
            at_goal: false,
            delayed: DelayedRewards::default(),
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn reached_goal(&self) -> bool {
        self.at_goal
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Real> {
        let mut rng = stream_rng(seed, &format!("env/{}", self.spec.id));
        self.x = rng.gen_range(0.0..START_JITTER);
        self.v = 0.0;
        self.steps = 0;
        self.finished = false;
        self.at_goal = false;
        self.delayed.reset();
        vec![self.x]
    }

    /// v' = damping * v + accel * a, x' = x + v', with a hard floor at the
    /// left end (inelastic). Markov reward is the position gain; reaching
    /// `length` ends the episode.
    pub fn internal_step(&self, state: &[Real], action: &[Real]) -> (Vec<Real>, Real, bool) {
        let a = clamp_action(action, &self.spec.action_low, &self.spec.action_high);
        let (x, v) = (state[0], state[1]);
        let mut nv = (DAMPING * v + ACCEL * a[0]).clamp(-V_MAX, V_MAX);
        let mut nx = x + nv;
        if nx < 0.0 {
            nx = 0.0;
            nv = 0.0;
        }
        let done = nx >= self.length;
        let reward = match self.spec.reward_mode {
            RewardMode::Sparse => {
                if done {
                    1.0
                } else {
                    0.0
                }
            }
            RewardMode::Dense | RewardMode::Delayed => nx - x,
        };
        (vec![nx, nv], reward, done)
    }

    pub fn step(&mut self, action: &[Real]) -> Result<StepOut> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        let (next, reward, at_goal) = self.internal_step(&[self.x, self.v], action);
        self.x = next[0];
        self.v = next[1];
        self.steps += 1;
        self.at_goal = at_goal;
        let done = at_goal || self.steps >= self.spec.max_episode_steps;
        self.finished = done;
        let reward = match self.spec.reward_mode {
            RewardMode::Delayed => self.delayed.transform(reward, done),
            _ => reward,
        };
        Ok(StepOut { obs: vec![self.x], reward, done })
    }

    pub fn internal_bounds(&self) -> Vec<(Real, Real)> {
        vec![(0.0, self.length), (-V_MAX, V_MAX)]
    }

    /// Goal contact means having crossed the far end.
    pub fn state_reaches_goal(&self, state: &[Real]) -> bool {
        state[0] >= self.length
    }

    /// Crossing the far end always ends the episode, in every reward mode.
    pub fn terminates_at_goal(&self) -> bool {
        true
    }

    pub fn internal_start(&self) -> Vec<Real> {
        vec![0.0, 0.0]
    }

    pub fn scripted_action(&self) -> Vec<Real> {
        vec![1.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_throttle_reaches_the_end_of_a_length_ten_corridor_quickly() {
        let mut env = ChainEnv::new(10.0, RewardMode::Dense);
        env.reset(0);
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(&[1.0]).unwrap().done {
                break;
            }
        }
        assert!(env.reached_goal());
        assert!(steps <= 10, "took {steps} steps");
    }

    #[test]
    fn dense_rewards_telescope_to_net_progress() {
        let mut env = ChainEnv::new(12.0, RewardMode::Dense);
        let x0 = env.reset(5)[0];
        let mut total = 0.0;
        let mut last = x0;
        for i in 0..env.spec().max_episode_steps {
            let a = if i % 3 == 2 { -0.5 } else { 0.9 };
            let out = env.step(&[a]).unwrap();
            total += out.reward;
            last = out.obs[0];
            if out.done {
                break;
            }
        }
        assert!((total - (last - x0)).abs() < 1e-9);
    }

    #[test]
    fn delayed_total_matches_dense_total_for_identical_actions() {
        let mut dense = ChainEnv::new(12.0, RewardMode::Dense);
        let mut delayed = ChainEnv::new(12.0, RewardMode::Delayed);
        dense.reset(3);
        delayed.reset(3);
        let (mut td, mut tl) = (0.0, 0.0);
        loop {
            let od = dense.step(&[0.8]).unwrap();
            let ol = delayed.step(&[0.8]).unwrap();
            td += od.reward;
            tl += ol.reward;
            if od.done {
                break;
            }
            assert_eq!(ol.reward, 0.0);
        }
        assert!((td - tl).abs() < 1e-9);
    }

    #[test]
    fn left_wall_is_inelastic() {
        let env = ChainEnv::new(10.0, RewardMode::Dense);
        let (next, _, done) = env.internal_step(&[0.1, -1.0], &[-1.0]);
        assert_eq!(next, vec![0.0, 0.0]);
        assert!(!done);
    }

    #[test]
    fn observation_hides_velocity() {
        let mut env = ChainEnv::new(10.0, RewardMode::Dense);
        let obs = env.reset(0);
        assert_eq!(obs.len(), 1);
        assert_eq!(env.spec().state_dim, 1);
    }
}
