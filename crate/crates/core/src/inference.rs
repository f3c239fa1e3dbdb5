//! Acting with a trained policy: several candidate return-to-go (RTG)
//! streams run in parallel over one shared state/action history; at each
//! step every stream proposes an action, the min of the two target critics
//! scores the proposals at the current state, and the best one (lowest index
//! on ties) is executed. Every stream's RTG is then decremented by the
//! observed reward. With Q-selection off, a single stream conditioned on the
//! dataset's best return is used as-is.

use crate::critic::{q_forward, CriticPair};
use crate::dataset::{Dataset, SegmentBatch};
use crate::envs::ToyEnv;
use crate::error::{Error, Result};
use crate::numerics::nn::bind_mlp_frozen;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::oracle::ScoreAnchors;
use crate::policy::PolicyModel;
use crate::Real;

/// Initial RTG values: a linear grid of fractions of the dataset's best
/// return, from 0.5x to 1.5x; a single candidate sits at exactly 1.0x.
pub fn make_candidates(dataset: &Dataset, m: usize) -> Vec<Real> {
    candidate_grid(dataset.max_return, m)
}

pub fn candidate_grid(max_return: Real, m: usize) -> Vec<Real> {
    assert!(m >= 1, "need at least one candidate");
    if m == 1 {
        return vec![max_return];
    }
    (0..m)
        .map(|i| (0.5 + i as Real / (m - 1) as Real) * max_return)
        .collect()
}

/// The shared episode history plus one running RTG value per candidate.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub initial: Vec<Real>,
    /// One value per (stream, step): `streams[i][t]` conditions step t.
    pub rtg_streams: Vec<Vec<Real>>,
    /// Normalized states, flattened `t * state_dim`.
    pub states: Vec<Real>,
    /// Executed actions, flattened `(t - 1) * action_dim`.
    pub actions: Vec<Real>,
    pub timesteps: Vec<usize>,
    state_dim: usize,
    action_dim: usize,
}

impl CandidateSet {
    pub fn new(candidates: Vec<Real>, state_dim: usize, action_dim: usize) -> Self {
        assert!(!candidates.is_empty(), "need at least one candidate");
        Self {
            rtg_streams: candidates.iter().map(|&c| vec![c]).collect(),
            initial: candidates,
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
            state_dim,
            action_dim,
        }
    }

    pub fn m(&self) -> usize {
        self.rtg_streams.len()
    }

    /// Steps observed so far, including the current (un-acted) one.
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Append the current (already normalized) state.
    pub fn push_state(&mut self, state: &[Real], timestep: usize) {
        assert_eq!(state.len(), self.state_dim);
        self.states.extend_from_slice(state);
        self.timesteps.push(timestep);
    }

    /// Record the executed action and observed reward; every stream's next
    /// RTG value is its current one minus the reward.
    pub fn record(&mut self, action: &[Real], reward: Real) {
        assert_eq!(action.len(), self.action_dim);
        self.actions.extend_from_slice(action);
        for stream in &mut self.rtg_streams {
            let next = stream.last().expect("streams are never empty") - reward;
            stream.push(next);
        }
    }

    /// The last `min(len, k)` steps as an m-row batch: rows differ only in
    /// their RTG column; the current action slot is zero (the prediction
    /// cannot see it).
    pub fn window_batch(&self, k: usize) -> Result<SegmentBatch> {
        let t = self.len();
        if t == 0 {
            return Err(Error::Shape { op: "window_batch", detail: "empty history".into() });
        }
        let m = self.m();
        let (s, a) = (self.state_dim, self.action_dim);
        let take = t.min(k);
        let pad = k - take;
        let first = t - take;
        let mut rtg = vec![0.0; m * k];
        let mut state = vec![0.0; m * k * s];
        let mut action = vec![0.0; m * k * a];
        let mut ts = vec![0usize; m * k];
        let mut mask = vec![0.0; m * k];
        for row in 0..m {
            for w in 0..take {
                let src = first + w;
                let dst = row * k + pad + w;
                rtg[dst] = self.rtg_streams[row][src];
                state[dst * s..(dst + 1) * s]
                    .copy_from_slice(&self.states[src * s..(src + 1) * s]);
                if src + 1 < t {
                    action[dst * a..(dst + 1) * a]
                        .copy_from_slice(&self.actions[src * a..(src + 1) * a]);
                }
                ts[dst] = self.timesteps[src];
                mask[dst] = 1.0;
            }
        }
        Ok(SegmentBatch {
            rtg: Tensor::new(vec![m, k], rtg)?,
            state: Tensor::new(vec![m, k, s], state)?,
            action: Tensor::new(vec![m, k, a], action)?,
            reward: Tensor::zeros(&[m, k]),
            timestep: ts,
            mask: Tensor::new(vec![m, k], mask)?,
        })
    }
}

/// Outcome of one action selection.
#[derive(Clone, Debug)]
pub struct Selection {
    pub action: Vec<Real>,
    pub candidate: usize,
    /// Min target-critic value of the chosen action, or NaN when Q-selection
    /// was off.
    pub q: Real,
}

/// One batched forward over all candidate streams, then argmax of the min
/// target-critic value at the current state; ties go to the lowest index.
/// With `use_q` false the first stream's action is taken directly and the
/// critics are never consulted.
pub fn select_action(
    policy: &PolicyModel,
    critics: &CriticPair,
    cand: &CandidateSet,
    use_q: bool,
) -> Result<Selection> {
    let k = policy.context_k();
    let batch = cand.window_batch(k)?;
    let (m, a, s) = (cand.m(), cand.action_dim, cand.state_dim);

    let mut tape = Tape::new();
    let pred = policy.forward_frozen(&mut tape, &batch)?;
    let pred = tape.value(pred).data();
    let mut proposals = vec![0.0; m * a];
    for row in 0..m {
        proposals[row * a..(row + 1) * a]
            .copy_from_slice(&pred[(row * k + k - 1) * a..(row * k + k) * a]);
    }
    if !use_q {
        return Ok(Selection { action: proposals[..a].to_vec(), candidate: 0, q: Real::NAN });
    }

    let t = cand.len();
    let current = &cand.states[(t - 1) * s..t * s];
    let mut tiled = Vec::with_capacity(m * s);
    for _ in 0..m {
        tiled.extend_from_slice(current);
    }
    let sv = tape.constant(Tensor::new(vec![m, s], tiled)?)?;
    let av = tape.constant(Tensor::new(vec![m, a], proposals.clone())?)?;
    let q1v = bind_mlp_frozen(&mut tape, &critics.targets.q1)?;
    let q2v = bind_mlp_frozen(&mut tape, &critics.targets.q2)?;
    let q1 = q_forward(&mut tape, &q1v, sv, av)?;
    let q2 = q_forward(&mut tape, &q2v, sv, av)?;
    let q1 = tape.value(q1).data();
    let q2 = tape.value(q2).data();

    let mut best = 0usize;
    let mut best_q = Real::NEG_INFINITY;
    for row in 0..m {
        let q = q1[row].min(q2[row]);
        if q > best_q {
            best_q = q;
            best = row;
        }
    }
    Ok(Selection { action: proposals[best * a..(best + 1) * a].to_vec(), candidate: best, q: best_q })
}

/// A deterministic lattice of at least `n` actions spanning the action box:
/// per-axis linspaces (endpoints included) crossed into a grid.
pub fn action_lattice(low: &[Real], high: &[Real], n: usize) -> Vec<Vec<Real>> {
    assert!(!low.is_empty() && low.len() == high.len());
    assert!(n >= 1);
    let dim = low.len();
    let per_axis = (n as Real).powf(1.0 / dim as Real).ceil() as usize;
    let per_axis = per_axis.max(2);
    let axis = |d: usize| -> Vec<Real> {
        (0..per_axis)
            .map(|i| low[d] + (high[d] - low[d]) * i as Real / (per_axis - 1) as Real)
            .collect()
    };
    let mut points: Vec<Vec<Real>> = vec![Vec::new()];
    for d in 0..dim {
        let vals = axis(d);
        points = points
            .into_iter()
            .flat_map(|p| {
                vals.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    points
}

/// Score every lattice action with the min of the two target critics at the
/// (normalized) state and return the best, lowest index on ties.
pub fn greedy_critic_action(
    critics: &CriticPair,
    norm_state: &[Real],
    lattice: &[Vec<Real>],
) -> Result<(Vec<Real>, Real)> {
    assert!(!lattice.is_empty());
    let (n, s, a) = (lattice.len(), norm_state.len(), lattice[0].len());
    let mut tiled = Vec::with_capacity(n * s);
    let mut actions = Vec::with_capacity(n * a);
    for point in lattice {
        tiled.extend_from_slice(norm_state);
        actions.extend_from_slice(point);
    }
    let mut tape = Tape::new();
    let sv = tape.constant(Tensor::new(vec![n, s], tiled)?)?;
    let av = tape.constant(Tensor::new(vec![n, a], actions)?)?;
    let q1v = bind_mlp_frozen(&mut tape, &critics.targets.q1)?;
    let q2v = bind_mlp_frozen(&mut tape, &critics.targets.q2)?;
    let q1 = q_forward(&mut tape, &q1v, sv, av)?;
    let q2 = q_forward(&mut tape, &q2v, sv, av)?;
    let q1 = tape.value(q1).data();
    let q2 = tape.value(q2).data();
    let mut best = 0usize;
    let mut best_q = Real::NEG_INFINITY;
    for i in 0..n {
        let q = q1[i].min(q2[i]);
        if q > best_q {
            best_q = q;
            best = i;
        }
    }
    Ok((lattice[best].clone(), best_q))
}

/// Play one episode picking the lattice action the critics like best at
/// every step — a policy-free baseline that exposes how far the Q functions
/// alone carry.
pub fn greedy_critic_rollout(
    env: &mut ToyEnv,
    critics: &CriticPair,
    state_mean: &[Real],
    state_std: &[Real],
    n_actions: usize,
    seed: u64,
) -> Result<RolloutTrace> {
    let spec = env.spec().clone();
    let lattice = action_lattice(&spec.action_low, &spec.action_high, n_actions);
    let mut obs = env.reset(seed);
    let mut steps = Vec::new();
    let mut episode_return = 0.0;
    let mut t = 0usize;
    loop {
        let norm: Vec<Real> = obs
            .iter()
            .zip(state_mean.iter().zip(state_std))
            .map(|(&x, (&m, &sd))| (x - m) / sd)
            .collect();
        let (action, q) = greedy_critic_action(critics, &norm, &lattice)?;
        let out = env.step(&action)?;
        steps.push(TraceStep { t, state: obs, action, reward: out.reward, candidate: 0, q });
        episode_return += out.reward;
        if out.done {
            break;
        }
        obs = out.obs;
        t += 1;
    }
    Ok(RolloutTrace {
        steps,
        episode_return,
        reached_goal: env.reached_goal(),
        initial_rtgs: Vec::new(),
        final_rtgs: Vec::new(),
    })
}

/// Evaluation summary for the critic-greedy baseline, same seeding scheme as
/// [`evaluate`].
pub fn evaluate_greedy(
    env: &mut ToyEnv,
    critics: &CriticPair,
    state_mean: &[Real],
    state_std: &[Real],
    n_actions: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    assert!(n_episodes >= 1);
    let mut returns = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    let mut total_steps = 0usize;
    for ep in 0..n_episodes {
        let ep_seed = seed ^ (ep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let trace = greedy_critic_rollout(env, critics, state_mean, state_std, n_actions, ep_seed)?;
        returns.push(trace.episode_return);
        successes += trace.reached_goal as usize;
        total_steps += trace.steps.len();
    }
    let n = returns.len() as Real;
    let mean = returns.iter().sum::<Real>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<Real>() / n;
    Ok(EvalReport {
        mean,
        std: var.sqrt(),
        normalized_mean: None,
        success_rate: successes as Real / n,
        steps_per_episode: total_steps as Real / n,
        returns,
    })
}

/// Everything the evaluator needs besides the environment.
pub struct Agent<'a> {
    pub policy: &'a PolicyModel,
    pub critics: &'a CriticPair,
    pub state_mean: &'a [Real],
    pub state_std: &'a [Real],
    /// Best return in the training data; anchors the candidate grid.
    pub max_return: Real,
    pub n_candidates: usize,
    pub eval_with_q: bool,
}

impl Agent<'_> {
    fn normalize(&self, raw: &[Real]) -> Vec<Real> {
        raw.iter()
            .zip(self.state_mean.iter().zip(self.state_std))
            .map(|(&x, (&m, &sd))| (x - m) / sd)
            .collect()
    }

    fn candidates(&self) -> Vec<Real> {
        if self.eval_with_q {
            candidate_grid(self.max_return, self.n_candidates)
        } else {
            vec![self.max_return]
        }
    }
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    pub t: usize,
    /// Raw (unnormalized) observation before the action.
    pub state: Vec<Real>,
    pub action: Vec<Real>,
    pub reward: Real,
    pub candidate: usize,
    pub q: Real,
}

#[derive(Clone, Debug)]
pub struct RolloutTrace {
    pub steps: Vec<TraceStep>,
    pub episode_return: Real,
    pub reached_goal: bool,
    pub initial_rtgs: Vec<Real>,
    /// Final value of every stream: initial minus the cumulative reward.
    pub final_rtgs: Vec<Real>,
}

impl RolloutTrace {
    /// One row per step: t, state, action, reward, chosen candidate, its Q
    /// (blank when Q-selection was off).
    pub fn to_csv(&self) -> String {
        let (s, a) = match self.steps.first() {
            Some(st) => (st.state.len(), st.action.len()),
            None => (0, 0),
        };
        let mut out = String::from("t");
        for d in 0..s {
            out.push_str(&format!(",s{d}"));
        }
        for d in 0..a {
            out.push_str(&format!(",a{d}"));
        }
        out.push_str(",reward,chosen_candidate_index,chosen_q\n");
        for st in &self.steps {
            out.push_str(&st.t.to_string());
            for v in &st.state {
                out.push_str(&format!(",{v}"));
            }
            for v in &st.action {
                out.push_str(&format!(",{v}"));
            }
            let q = if st.q.is_nan() { String::new() } else { st.q.to_string() };
            out.push_str(&format!(",{},{},{q}\n", st.reward, st.candidate));
        }
        out
    }
}

/// Play one episode: select, step, record, decrement RTGs, until the
/// environment reports done (terminal or step cap).
pub fn rollout(env: &mut ToyEnv, agent: &Agent, seed: u64) -> Result<RolloutTrace> {
    let spec = env.spec().clone();
    let initial = agent.candidates();
    let mut cand = CandidateSet::new(initial.clone(), spec.state_dim, spec.action_dim);
    let mut obs = env.reset(seed);
    let mut steps = Vec::new();
    let mut episode_return = 0.0;
    let mut t = 0usize;
    loop {
        cand.push_state(&agent.normalize(&obs), t);
        let sel = select_action(agent.policy, agent.critics, &cand, agent.eval_with_q)?;
        let out = env.step(&sel.action)?;
        steps.push(TraceStep {
            t,
            state: obs,
            action: sel.action.clone(),
            reward: out.reward,
            candidate: sel.candidate,
            q: sel.q,
        });
        episode_return += out.reward;
        cand.record(&sel.action, out.reward);
        if out.done {
            break;
        }
        obs = out.obs;
        t += 1;
    }
    let final_rtgs = cand
        .rtg_streams
        .iter()
        .map(|s| *s.last().expect("nonempty stream"))
        .collect();
    Ok(RolloutTrace {
        steps,
        episode_return,
        reached_goal: env.reached_goal(),
        initial_rtgs: initial,
        final_rtgs,
    })
}

/// Evaluation summary over several rollouts.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub returns: Vec<Real>,
    pub mean: Real,
    /// Population standard deviation of the returns.
    pub std: Real,
    /// 100 * (mean - random) / (expert - random), when anchors are given.
    pub normalized_mean: Option<Real>,
    pub success_rate: Real,
    pub steps_per_episode: Real,
}

/// Roll `n_episodes` independent episodes (seeds derived from `seed`) and
/// summarize. Anchors, when provided, must be well separated.
pub fn evaluate(
    env: &mut ToyEnv,
    agent: &Agent,
    n_episodes: usize,
    seed: u64,
    anchors: Option<&ScoreAnchors>,
) -> Result<EvalReport> {
    assert!(n_episodes >= 1, "need at least one evaluation episode");
    let mut returns = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    let mut total_steps = 0usize;
    for ep in 0..n_episodes {
        let ep_seed = seed ^ (ep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let trace = rollout(env, agent, ep_seed)?;
        returns.push(trace.episode_return);
        successes += trace.reached_goal as usize;
        total_steps += trace.steps.len();
    }
    let n = returns.len() as Real;
    let mean = returns.iter().sum::<Real>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<Real>() / n;
    let normalized_mean = match anchors {
        None => None,
        Some(a) => Some(a.normalized(mean)?),
    };
    Ok(EvalReport {
        mean,
        std: var.sqrt(),
        normalized_mean,
        success_rate: successes as Real / n,
        steps_per_episode: total_steps as Real / n,
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{CriticConfig, CriticPair};
    use crate::envs::RewardMode;
    use crate::numerics::nn::Activation;
    use crate::policy::{PolicyConfig, PolicyParams};
    use crate::rng::stream_rng;

    fn tiny_model(state_dim: usize, action_dim: usize, k: usize, seed: u64) -> PolicyModel {
        let cfg = PolicyConfig {
            state_dim,
            action_dim,
            context_k: k,
            n_layers: 1,
            n_heads: 2,
            embed_dim: 8,
            max_timestep: 512,
            dropout_keep: 1.0,
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
        };
        let mut rng = stream_rng(seed, "inference-test");
        PolicyModel::Transformer(PolicyParams::init(cfg, &mut rng).unwrap())
    }

    fn tiny_critics(state_dim: usize, action_dim: usize, seed: u64) -> CriticPair {
        let mut rng = stream_rng(seed, "inference-test-critic");
        let cfg = CriticConfig { hidden_dim: 8, n_hidden_layers: 2, activation: Activation::Mish };
        CriticPair::init(cfg, state_dim, action_dim, &mut rng).unwrap()
    }

    #[test]
    fn the_candidate_grid_spans_half_to_one_and_a_half_times_the_best_return() {
        assert_eq!(candidate_grid(10.0, 1), vec![10.0]);
        assert_eq!(candidate_grid(10.0, 5), vec![5.0, 7.5, 10.0, 12.5, 15.0]);
        let g = candidate_grid(3.0, 8);
        assert_eq!(g.len(), 8);
        assert!(g.windows(2).all(|w| w[0] < w[1]), "not strictly increasing: {g:?}");
        assert_eq!(g[0], 1.5);
        assert_eq!(g[7], 4.5);
    }

    #[test]
    fn rtg_streams_decrement_by_the_observed_reward_exactly() {
        let mut cand = CandidateSet::new(vec![2.0, 4.0], 1, 1);
        let rewards = [0.25, -0.5, 1.0];
        let mut expected = [2.0, 4.0];
        for (t, &r) in rewards.iter().enumerate() {
            cand.push_state(&[0.0], t);
            cand.record(&[0.1], r);
            for (i, e) in expected.iter_mut().enumerate() {
                *e -= r;
                assert_eq!(cand.rtg_streams[i].last().unwrap().to_bits(), e.to_bits());
            }
        }
        assert_eq!(cand.rtg_streams[0].len(), 4);
    }

    #[test]
    fn batched_candidate_evaluation_matches_sequential_bit_for_bit() {
        let (s, a, k) = (2, 2, 3);
        let policy = tiny_model(s, a, k, 40);
        let mut rng = stream_rng(42, "inference-test");
        let mut cand = CandidateSet::new(candidate_grid(5.0, 4), s, a);
        use rand::Rng;
        for t in 0..4 {
            let st: Vec<Real> = (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            cand.push_state(&st, t);
            if t < 3 {
                let ac: Vec<Real> = (0..a).map(|_| rng.gen_range(-1.0..1.0)).collect();
                cand.record(&ac, rng.gen_range(-1.0..1.0));
            }
        }
        let batch = cand.window_batch(k).unwrap();
        let mut tape = Tape::new();
        let pred = policy.forward_frozen(&mut tape, &batch).unwrap();
        let batched = tape.value(pred).data().to_vec();

        for row in 0..cand.m() {
            let mut single = cand.clone();
            single.rtg_streams = vec![cand.rtg_streams[row].clone()];
            single.initial = vec![cand.initial[row]];
            let sb = single.window_batch(k).unwrap();
            let mut tape = Tape::new();
            let p = policy.forward_frozen(&mut tape, &sb).unwrap();
            assert_eq!(
                tape.value(p).data(),
                &batched[row * k * a..(row + 1) * k * a],
                "candidate {row} diverges from the batched forward"
            );
        }
    }

    #[test]
    fn selection_takes_the_highest_min_q_with_lowest_index_ties() {
        let (s, a, k) = (2, 2, 3);
        let policy = tiny_model(s, a, k, 43);
        let critics = tiny_critics(s, a, 44);
        let mut cand = CandidateSet::new(candidate_grid(4.0, 6), s, a);
        cand.push_state(&[0.3, -0.2], 0);
        let sel = select_action(&policy, &critics, &cand, true).unwrap();

        // Recompute every candidate's min target-Q by hand.
        let batch = cand.window_batch(k).unwrap();
        let mut tape = Tape::new();
        let pred = policy.forward_frozen(&mut tape, &batch).unwrap();
        let pred = tape.value(pred).data().to_vec();
        let mut qs = Vec::new();
        for row in 0..cand.m() {
            let action = &pred[(row * k + k - 1) * a..(row * k + k) * a];
            let mut tape = Tape::new();
            let q1v = bind_mlp_frozen(&mut tape, &critics.targets.q1).unwrap();
            let q2v = bind_mlp_frozen(&mut tape, &critics.targets.q2).unwrap();
            let sv = tape.constant(Tensor::new(vec![1, s], vec![0.3, -0.2]).unwrap()).unwrap();
            let av = tape.constant(Tensor::new(vec![1, a], action.to_vec()).unwrap()).unwrap();
            let q1 = q_forward(&mut tape, &q1v, sv, av).unwrap();
            let q2 = q_forward(&mut tape, &q2v, sv, av).unwrap();
            qs.push(tape.value(q1).data()[0].min(tape.value(q2).data()[0]));
        }
        assert!(qs.iter().all(|&q| q <= sel.q));
        assert_eq!(sel.candidate, qs.iter().position(|&q| q == sel.q).unwrap());

        // Identical constant critics make every candidate tie; index 0 wins.
        let mut flat = critics.clone();
        for mlp in [&mut flat.targets.q1, &mut flat.targets.q2] {
            for l in &mut mlp.layers {
                for v in l.w.data_mut() {
                    *v = 0.0;
                }
                for v in l.b.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let sel = select_action(&policy, &flat, &cand, true).unwrap();
        assert_eq!(sel.candidate, 0);
        assert_eq!(sel.q, 0.0);
    }

    #[test]
    fn without_q_selection_the_first_stream_acts_directly() {
        let (s, a, k) = (2, 2, 3);
        let policy = tiny_model(s, a, k, 45);
        let critics = tiny_critics(s, a, 46);
        let cand = {
            let mut c = CandidateSet::new(vec![7.0], s, a);
            c.push_state(&[0.1, 0.1], 0);
            c
        };
        let sel = select_action(&policy, &critics, &cand, false).unwrap();
        assert_eq!(sel.candidate, 0);
        assert!(sel.q.is_nan());
        assert_eq!(sel.action.len(), a);
    }

    #[test]
    fn rollouts_are_deterministic_and_balance_their_rtg_books() {
        let mut env = ToyEnv::make("open", RewardMode::Dense).unwrap();
        let spec = env.spec().clone();
        let policy = tiny_model(spec.state_dim, spec.action_dim, 4, 47);
        let critics = tiny_critics(spec.state_dim, spec.action_dim, 48);
        let agent = Agent {
            policy: &policy,
            critics: &critics,
            state_mean: &[0.0; 4],
            state_std: &[1.0; 4],
            max_return: 10.0,
            n_candidates: 3,
            eval_with_q: true,
        };
        let a = rollout(&mut env, &agent, 9).unwrap();
        let b = rollout(&mut env, &agent, 9).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.steps.len(), spec.max_episode_steps);

        // Every stream ends at its initial value minus the episode return,
        // up to the order of the subtractions.
        for (i, f) in a.final_rtgs.iter().enumerate() {
            let mut expect = a.initial_rtgs[i];
            for st in &a.steps {
                expect -= st.reward;
            }
            assert_eq!(f.to_bits(), expect.to_bits());
            assert!((f - (a.initial_rtgs[i] - a.episode_return)).abs() < 1e-9);
        }

        let c = rollout(&mut env, &agent, 10).unwrap();
        assert_ne!(a.to_csv(), c.to_csv(), "different seeds gave identical traces");
    }

    #[test]
    fn evaluation_summarizes_and_normalizes_returns() {
        let mut env = ToyEnv::make("open", RewardMode::Sparse).unwrap();
        let spec = env.spec().clone();
        let policy = tiny_model(spec.state_dim, spec.action_dim, 3, 49);
        let critics = tiny_critics(spec.state_dim, spec.action_dim, 50);
        let agent = Agent {
            policy: &policy,
            critics: &critics,
            state_mean: &[0.0; 4],
            state_std: &[1.0; 4],
            max_return: 1.0,
            n_candidates: 2,
            eval_with_q: true,
        };
        let anchors = ScoreAnchors { random: 0.0, expert: 1.0 };
        let rep = evaluate(&mut env, &agent, 3, 5, Some(&anchors)).unwrap();
        assert_eq!(rep.returns.len(), 3);
        assert!((rep.mean - rep.returns.iter().sum::<Real>() / 3.0).abs() < 1e-12);
        assert_eq!(rep.normalized_mean, Some(100.0 * rep.mean));
        assert!(rep.success_rate >= 0.0 && rep.success_rate <= 1.0);
        assert!(rep.steps_per_episode > 0.0);

        let flat = ScoreAnchors { random: 0.5, expert: 0.5 };
        assert!(matches!(
            evaluate(&mut env, &agent, 1, 5, Some(&flat)),
            Err(Error::DegenerateAnchors { .. })
        ));
        assert!(evaluate(&mut env, &agent, 1, 5, None).unwrap().normalized_mean.is_none());
    }

    #[test]
    fn the_action_lattice_covers_the_box_and_greedy_selection_is_argmax() {
        let lattice = action_lattice(&[-1.0, 0.0], &[1.0, 4.0], 9);
        assert_eq!(lattice.len(), 9);
        assert!(lattice.contains(&vec![-1.0, 0.0]));
        assert!(lattice.contains(&vec![1.0, 4.0]));
        assert!(lattice.contains(&vec![0.0, 2.0]));
        for p in &lattice {
            assert!((-1.0..=1.0).contains(&p[0]) && (0.0..=4.0).contains(&p[1]));
        }
        // One-dimensional boxes become a plain linspace.
        let line = action_lattice(&[0.0], &[1.0], 5);
        assert_eq!(line, vec![vec![0.0], vec![0.25], vec![0.5], vec![0.75], vec![1.0]]);

        let critics = tiny_critics(2, 2, 60);
        let (action, q) = greedy_critic_action(&critics, &[0.2, -0.1], &lattice).unwrap();
        // Recompute the score of every point one at a time.
        let mut best = (Real::NEG_INFINITY, 0usize);
        for (i, p) in lattice.iter().enumerate() {
            let (_, qi) = greedy_critic_action(&critics, &[0.2, -0.1], &[p.clone()]).unwrap();
            if qi > best.0 {
                best = (qi, i);
            }
        }
        assert_eq!(q.to_bits(), best.0.to_bits());
        assert_eq!(action, lattice[best.1]);
    }

    #[test]
    fn the_greedy_baseline_plays_full_episodes_deterministically() {
        let mut env = ToyEnv::make("chain-4", RewardMode::Dense).unwrap();
        let critics = tiny_critics(1, 1, 61);
        let a = greedy_critic_rollout(&mut env, &critics, &[0.0], &[1.0], 5, 3).unwrap();
        let b = greedy_critic_rollout(&mut env, &critics, &[0.0], &[1.0], 5, 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(!a.steps.is_empty());
        let rep = evaluate_greedy(&mut env, &critics, &[0.0], &[1.0], 5, 3, 7).unwrap();
        assert_eq!(rep.returns.len(), 3);
        assert!(rep.normalized_mean.is_none());
    }

    #[test]
    fn traces_export_as_csv_with_one_row_per_step() {
        let mut env = ToyEnv::make("chain-4", RewardMode::Dense).unwrap();
        let spec = env.spec().clone();
        let policy = tiny_model(spec.state_dim, spec.action_dim, 3, 51);
        let critics = tiny_critics(spec.state_dim, spec.action_dim, 52);
        let agent = Agent {
            policy: &policy,
            critics: &critics,
            state_mean: &[0.0],
            state_std: &[1.0],
            max_return: 4.0,
            n_candidates: 1,
            eval_with_q: false,
        };
        let trace = rollout(&mut env, &agent, 3).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,s0,a0,reward,chosen_candidate_index,chosen_q");
        assert_eq!(csv.lines().count(), trace.steps.len() + 1);
        // Q column is blank when selection never consulted the critics.
        assert!(csv.lines().nth(1).unwrap().ends_with(",0,"));
    }
}
