//! Brute-force reference implementations, deliberately independent of the
//! learning stack: numerical gradients, literal discounted sums, synchronous
//! value iteration, and a discretize-then-plan expert for the toy envs. Tests
//! pin the fast implementations against these.

use crate::dataset::Dataset;
use crate::envs::{TabularMdp, ToyEnv};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::Real;
use rand::Rng;

/// Central-difference gradient of a scalar function of a flat vector:
/// df/dx_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn finite_diff_gradient(mut f: impl FnMut(&[Real]) -> Real, x: &[Real], eps: Real) -> Vec<Real> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Literal n-step discounted return: sum_j gamma^j r_j + gamma^len * bootstrap,
/// accumulated with a running power of gamma in index order.
pub fn brute_nstep_return(rewards: &[Real], gamma: Real, bootstrap: Real) -> Real {
    let mut acc = 0.0;
    let mut g = 1.0;
    for &r in rewards {
        acc += g * r;
        g *= gamma;
    }
    acc + g * bootstrap
}

/// Output of synchronous value iteration.
#[derive(Clone, Debug)]
pub struct ValueTables {
    pub v: Vec<Real>,
    /// Row-major `[s][a]`.
    pub q: Vec<Real>,
    pub iterations: usize,
    /// max |V_k+1 - V_k| at the final sweep.
    pub residual: Real,
    /// Residual per sweep, for convergence inspection.
    pub history: Vec<Real>,
}

impl ValueTables {
    pub fn greedy(&self, s: usize, n_actions: usize) -> usize {
        let row = &self.q[s * n_actions..(s + 1) * n_actions];
        let mut best = 0;
        for (a, &q) in row.iter().enumerate() {
            if q > row[best] {
                best = a;
            }
        }
        best
    }
}

/// Synchronous sweeps of V <- max_a [ R(s,a) + gamma * sum_s' T V(s') ] until
/// the residual drops below `tol` or `max_iters` sweeps pass.
pub fn value_iteration(mdp: &TabularMdp, gamma: Real, tol: Real, max_iters: usize) -> ValueTables {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut history = Vec::new();
    let mut residual = Real::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters && residual > tol {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            let mut best = Real::NEG_INFINITY;
            for a in 0..na {
                let mut exp = 0.0;
                for (sp, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    exp += p * v[sp];
                }
                let qa = mdp.reward_at(s, a) + gamma * exp;
                q[s * na + a] = qa;
                if qa > best {
                    best = qa;
                }
            }
            next[s] = best;
        }
        residual = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, Real::max);
        history.push(residual);
        v = next;
        iterations += 1;
    }
    ValueTables { v, q, iterations, residual, history }
}

/// Planner grid sized from the environment's bounds: two cells per unit of
/// maze position (plus 5 bins per velocity axis), four per unit of corridor
/// position (plus 9 velocity bins). These resolutions solve every bundled
/// layout; see the refinement tests below.
pub fn default_anchor_bins(env: &ToyEnv) -> Vec<usize> {
    let bounds = env.internal_bounds();
    let span = |axis: usize| bounds[axis].1 - bounds[axis].0;
    if env.internal_dim() == 4 {
        vec![
            (2.0 * span(0)).round() as usize,
            (2.0 * span(1)).round() as usize,
            5,
            5,
        ]
    } else {
        vec![(4.0 * span(0)).round() as usize, 9]
    }
}

/// Compute both anchors: a Monte-Carlo random-policy mean and the
/// discretized-optimal return on the default grid.
pub fn score_anchors(env: &mut ToyEnv, episodes: usize, seed: u64) -> Result<ScoreAnchors> {
    let bins = default_anchor_bins(env);
    let expert = discretized_optimal(env, &bins, 3, 0.99, 1e-5)?;
    let random = random_return(env, episodes, seed);
    if (expert - random).abs() < 1e-9 {
        return Err(Error::DegenerateAnchors { expert, random });
    }
    Ok(ScoreAnchors { random, expert })
}

/// Mean undiscounted return of a uniform-random policy, the low anchor for
/// normalized scores.
pub fn random_return(env: &mut ToyEnv, episodes: usize, seed: u64) -> Real {
    let spec = env.spec().clone();
    let mut rng = stream_rng(seed, "oracle/random-policy");
    let mut total = 0.0;
    for ep in 0..episodes {
        env.reset(seed ^ (ep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut ret = 0.0;
        loop {
            let a: Vec<Real> = spec
                .action_low
                .iter()
                .zip(&spec.action_high)
                .map(|(&lo, &hi)| rng.gen_range(lo..=hi))
                .collect();
            let out = env.step(&a).expect("episode bookkeeping");
            ret += out.reward;
            if out.done {
                break;
            }
        }
        total += ret;
    }
    total / episodes as Real
}

/// Regular lattice of cell centers over axis-aligned bounds, with multilinear
/// interpolation between adjacent centers. Values live on the centers;
/// querying an arbitrary point blends the 2^d surrounding centers. Plain
/// nearest-cell aggregation is not used because its projection error is
/// amplified by 1/(1-gamma) and at gamma near 1 it manufactures spurious
/// positive-reward cycles that derail greedy rollouts.
struct CenterLattice {
    bounds: Vec<(Real, Real)>,
    bins: Vec<usize>,
}

impl CenterLattice {
    fn len(&self) -> usize {
        self.bins.iter().product()
    }

    /// Coordinates of a flat cell id (last axis least significant).
    fn center(&self, id: usize) -> Vec<Real> {
        let mut rem = id;
        let mut s = vec![0.0; self.bounds.len()];
        for i in (0..self.bounds.len()).rev() {
            let b = self.bins[i];
            let j = rem % b;
            rem /= b;
            let (lo, hi) = self.bounds[i];
            s[i] = lo + (hi - lo) * (j as Real + 0.5) / b as Real;
        }
        s
    }

    /// Interpolation stencil for a point: up to 2^d (cell id, weight) pairs
    /// with weights summing to 1. Points outside the center hull clamp to it.
    fn stencil(&self, state: &[Real], out: &mut Vec<(usize, Real)>) {
        out.clear();
        let d = self.bounds.len();
        let mut lo_cell = [0usize; 8];
        let mut frac = [0.0 as Real; 8];
        for i in 0..d {
            let b = self.bins[i];
            let (lo, hi) = self.bounds[i];
            if b == 1 {
                lo_cell[i] = 0;
                frac[i] = 0.0;
                continue;
            }
            // Continuous index in center space: center j sits at index j.
            let t = (((state[i] - lo) / (hi - lo)) * b as Real - 0.5).clamp(0.0, (b - 1) as Real);
            let j0 = (t.floor() as usize).min(b - 2);
            lo_cell[i] = j0;
            frac[i] = t - j0 as Real;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut id = 0usize;
            for i in 0..d {
                let hi_side = (corner >> i) & 1 == 1;
                w *= if hi_side { frac[i] } else { 1.0 - frac[i] };
                let j = (lo_cell[i] + hi_side as usize).min(self.bins[i] - 1);
                id = id * self.bins[i] + j;
            }
            if w > 0.0 {
                out.push((id, w));
            }
        }
    }

    fn interpolate(&self, values: &[Real], state: &[Real], buf: &mut Vec<(usize, Real)>) -> Real {
        self.stencil(state, buf);
        buf.iter().map(|&(id, w)| w * values[id]).sum()
    }
}

/// Expert anchor: project the env's internal dynamics onto a lattice of cell
/// centers (transitions land as multilinear weight mixtures), run value
/// iteration to `tol`, then roll out greedily in the *true* continuous env
/// with one-step lookahead against the interpolated values. Errors when the
/// rollout never reaches the goal (grid too coarse to navigate); envs that
/// keep running after goal contact are rolled to their step cap and must
/// touch the goal at least once.
pub fn discretized_optimal(
    env: &ToyEnv,
    state_bins: &[usize],
    action_bins: usize,
    gamma: Real,
    tol: Real,
) -> Result<Real> {
    let bounds = env.internal_bounds();
    assert_eq!(state_bins.len(), bounds.len(), "one bin count per state axis");
    assert!(bounds.len() <= 8, "lattice supports up to 8 state axes");
    assert!(action_bins >= 2);
    assert!(tol > 0.0);
    let lattice = CenterLattice { bounds, bins: state_bins.to_vec() };
    let n_states = lattice.len();
    let spec = env.spec().clone();

    // Action grid: per-dimension linspace over the bounds, cross product.
    let per_dim: Vec<Vec<Real>> = spec
        .action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(&lo, &hi)| {
            (0..action_bins)
                .map(|i| lo + (hi - lo) * i as Real / (action_bins - 1) as Real)
                .collect()
        })
        .collect();
    let mut actions: Vec<Vec<Real>> = vec![vec![]];
    for dim in &per_dim {
        let mut next = Vec::with_capacity(actions.len() * dim.len());
        for a in &actions {
            for &v in dim {
                let mut e = a.clone();
                e.push(v);
                next.push(e);
            }
        }
        actions = next;
    }

    // Tabulate transitions once: reward, terminal flag, and the stencil of
    // the true next state, flattened CSR-style.
    let na = actions.len();
    let mut reward = vec![0.0; n_states * na];
    let mut done = vec![false; n_states * na];
    let mut stencil_start = Vec::with_capacity(n_states * na + 1);
    let mut stencil_id: Vec<u32> = Vec::new();
    let mut stencil_w: Vec<Real> = Vec::new();
    let mut buf = Vec::with_capacity(1 << lattice.bounds.len());
    stencil_start.push(0u32);
    for s in 0..n_states {
        let st = lattice.center(s);
        for (a, act) in actions.iter().enumerate() {
            let (ns, r, d) = env.internal_step(&st, act);
            reward[s * na + a] = r;
            done[s * na + a] = d;
            if !d {
                lattice.stencil(&ns, &mut buf);
                for &(id, w) in &buf {
                    stencil_id.push(id as u32);
                    stencil_w.push(w);
                }
            }
            stencil_start.push(stencil_id.len() as u32);
        }
    }

    let mut v = vec![0.0; n_states];
    for _ in 0..20_000 {
        let mut residual: Real = 0.0;
        let mut next_v = vec![0.0; n_states];
        for s in 0..n_states {
            let mut best = Real::NEG_INFINITY;
            for a in 0..na {
                let idx = s * na + a;
                let mut q = reward[idx];
                if !done[idx] {
                    let (from, to) =
                        (stencil_start[idx] as usize, stencil_start[idx + 1] as usize);
                    let mut exp = 0.0;
                    for k in from..to {
                        exp += stencil_w[k] * v[stencil_id[k] as usize];
                    }
                    q += gamma * exp;
                }
                if q > best {
                    best = q;
                }
            }
            next_v[s] = best;
            residual = residual.max((best - v[s]).abs());
        }
        v = next_v;
        if residual <= tol {
            break;
        }
    }

    // Greedy rollout with one-step lookahead from the true continuous state.
    let terminating = env.terminates_at_goal();
    let mut state = env.internal_start();
    let mut ret = 0.0;
    let mut reached = false;
    for _ in 0..spec.max_episode_steps {
        let mut best_q = Real::NEG_INFINITY;
        let mut best: Option<(Vec<Real>, Real, bool)> = None;
        for act in &actions {
            let (ns, r, d) = env.internal_step(&state, act);
            let q = r + if d { 0.0 } else { gamma * lattice.interpolate(&v, &ns, &mut buf) };
            if q > best_q {
                best_q = q;
                best = Some((ns, r, d));
            }
        }
        let (ns, r, d) = best.expect("nonempty action grid");
        ret += r;
        reached = reached || env.state_reaches_goal(&ns);
        state = ns;
        if d {
            return Ok(ret);
        }
    }
    if !terminating && reached {
        return Ok(ret);
    }
    Err(Error::GridTooCoarse(format!(
        "greedy rollout on {state_bins:?} bins x {action_bins} actions never reached the goal \
         ({} steps)",
        spec.max_episode_steps
    )))
}

/// Empirical value of the policy that generated a dataset: the mean episode
/// return over its trajectories (undiscounted, from initial states). A
/// trained policy improving on the data should score at least this.
pub fn behavior_value(dataset: &Dataset) -> Result<Real> {
    if dataset.trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: Real = dataset.trajectories.iter().map(|t| t.episode_return()).sum();
    Ok(total / dataset.trajectories.len() as Real)
}

/// High/low anchors for normalized scores.
#[derive(Clone, Copy, Debug)]
pub struct ScoreAnchors {
    pub random: Real,
    pub expert: Real,
}

impl ScoreAnchors {
    /// 100 * (x - random) / (expert - random); errors when the anchors
    /// coincide and the scale is undefined.
    pub fn normalized(&self, x: Real) -> Result<Real> {
        let span = self.expert - self.random;
        if span == 0.0 {
            return Err(Error::DegenerateAnchors {
                expert: self.expert as f64,
                random: self.random as f64,
            });
        }
        Ok(100.0 * (x - self.random) / span)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_random_mdp, RewardMode};

    #[test]
    fn finite_diff_of_square_at_three_is_six() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6, "got {}", g[0]);
    }

    #[test]
    fn finite_diff_handles_multiple_coordinates() {
        // f = sin(x) * y + y^3 at (0.7, -1.3).
        let f = |v: &[Real]| v[0].sin() * v[1] + v[1].powi(3);
        let x = [0.7, -1.3];
        let g = finite_diff_gradient(f, &x, 1e-5);
        assert!((g[0] - x[0].cos() * x[1]).abs() < 1e-8);
        assert!((g[1] - (x[0].sin() + 3.0 * x[1] * x[1])).abs() < 1e-7);
    }

    #[test]
    fn brute_nstep_edge_cases() {
        // No rewards: just the bootstrap at power zero.
        assert_eq!(brute_nstep_return(&[], 0.9, 5.0), 5.0);
        // Gamma zero: only the immediate reward survives.
        assert_eq!(brute_nstep_return(&[3.0, 100.0], 0.0, 7.0), 3.0);
        // Hand-computed: 1 + 0.5*2 + 0.25*4 = 3.
        assert_eq!(brute_nstep_return(&[1.0, 2.0], 0.5, 4.0), 3.0);
    }

    #[test]
    fn value_iteration_with_gamma_zero_is_myopic() {
        let mdp = make_random_mdp(5, 3, 9);
        let tables = value_iteration(&mdp, 0.0, 1e-12, 100);
        for s in 0..5 {
            let best = (0..3).map(|a| mdp.reward_at(s, a)).fold(Real::NEG_INFINITY, Real::max);
            assert!((tables.v[s] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn two_state_chain_has_hand_computed_values() {
        // s0 -(r=0)-> s1, s1 -(r=1)-> s1, gamma = 0.5:
        // V(s1) = 1 / (1 - 0.5) = 2, V(s0) = 0 + 0.5 * V(s1) = 1.
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![0.0, 1.0, 0.0, 1.0],
            reward: vec![0.0, 1.0],
        };
        let tables = value_iteration(&mdp, 0.5, 1e-12, 1000);
        assert!((tables.v[0] - 1.0).abs() < 1e-9);
        assert!((tables.v[1] - 2.0).abs() < 1e-9);
        assert!(tables.residual <= 1e-12);
    }

    #[test]
    fn residuals_shrink_monotonically_on_a_contraction() {
        let mdp = make_random_mdp(8, 2, 4);
        let tables = value_iteration(&mdp, 0.9, 1e-10, 10_000);
        assert!(tables.residual <= 1e-10);
        // Allow tiny plateaus from floating point, but no growth.
        for w in tables.history.windows(2) {
            assert!(w[1] <= w[0] * 1.0000001, "{:?}", &tables.history);
        }
    }

    #[test]
    fn chain_expert_matches_closed_form_simulation() {
        // The corridor has no local traps, so the discretized expert should
        // recover (within discretization slack) the constant full-throttle
        // return, which telescopes to ~length.
        let env = ToyEnv::make("chain-10", RewardMode::Dense).unwrap();
        let expert = discretized_optimal(&env, &[40, 9], 3, 0.99, 1e-6).unwrap();
        // Closed form: total dense reward = final_x - 0; final_x is the first
        // x >= 10 under v' = 0.9v + 0.5, capped at 1.5.
        let (mut x, mut v) = (0.0, 0.0);
        while x < 10.0 {
            v = (0.9 * v + 0.5 as Real).min(1.5);
            x += v;
        }
        assert!((expert - x).abs() / x < 0.15, "expert {expert} vs closed form {x}");
    }

    #[test]
    fn discretized_expert_solves_the_open_maze() {
        let env = ToyEnv::make("open", RewardMode::Sparse).unwrap();
        let expert = discretized_optimal(&env, &[14, 10, 5, 5], 3, 0.99, 1e-6).unwrap();
        assert_eq!(expert, 1.0);
    }

    #[test]
    fn refining_the_grid_does_not_degrade_the_expert() {
        let env = ToyEnv::make("umaze", RewardMode::Sparse).unwrap();
        let coarse = discretized_optimal(&env, &[22, 10, 5, 5], 3, 0.99, 1e-6).unwrap();
        let fine = discretized_optimal(&env, &[33, 15, 7, 7], 3, 0.99, 1e-6).unwrap();
        // Sparse return is 1 iff the rollout reaches the goal.
        assert_eq!(coarse, 1.0);
        assert!(fine >= coarse - 1e-9);
    }

    #[test]
    fn hopeless_grids_error_out() {
        let env = ToyEnv::make("umaze", RewardMode::Sparse).unwrap();
        // One cell per axis cannot express the corridor.
        match discretized_optimal(&env, &[1, 1, 1, 1], 2, 0.99, 1e-6) {
            Err(Error::GridTooCoarse(msg)) => assert!(msg.contains("1")),
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn expert_anchor_beats_the_random_anchor_on_every_bundled_env() {
        let cases: [(&str, RewardMode, &[usize]); 4] = [
            ("open", RewardMode::Sparse, &[14, 10, 5, 5]),
            ("umaze", RewardMode::Sparse, &[22, 10, 5, 5]),
            ("umaze", RewardMode::Dense, &[22, 10, 5, 5]),
            ("chain-10", RewardMode::Dense, &[40, 9]),
        ];
        for (id, mode, bins) in cases {
            let mut env = ToyEnv::make(id, mode).unwrap();
            let expert = discretized_optimal(&env, bins, 3, 0.99, 1e-5).unwrap();
            let random = random_return(&mut env, 100, 7);
            assert!(
                expert > random,
                "{id}/{}: expert {expert} vs random {random}",
                mode.name()
            );
        }
    }

    #[test]
    fn random_policy_rarely_solves_sparse_umaze() {
        let mut env = ToyEnv::make("umaze", RewardMode::Sparse).unwrap();
        let r = random_return(&mut env, 200, 0);
        assert!(r < 0.2, "random return {r}");
    }

    #[test]
    fn behavior_value_is_the_mean_episode_return() {
        use crate::dataset::{Dataset, Trajectory};
        let make = |rewards: Vec<Real>| {
            let t = rewards.len();
            Trajectory::new(vec![0.0; t], vec![0.0; t], rewards, (0..t).collect(), false)
        };
        let one = Dataset::from_trajectories(
            "chain-10",
            RewardMode::Dense,
            1,
            1,
            vec![make(vec![1.0, 2.0])],
        );
        assert_eq!(behavior_value(&one).unwrap(), 3.0);
        let same = Dataset::from_trajectories(
            "chain-10",
            RewardMode::Dense,
            1,
            1,
            vec![make(vec![2.0]), make(vec![2.0])],
        );
        assert_eq!(behavior_value(&same).unwrap(), 2.0);
        let mixed = Dataset::from_trajectories(
            "chain-10",
            RewardMode::Dense,
            1,
            1,
            vec![make(vec![1.0]), make(vec![2.0]), make(vec![6.0])],
        );
        assert_eq!(behavior_value(&mixed).unwrap(), 3.0);
        let empty = Dataset::from_trajectories("chain-10", RewardMode::Dense, 1, 1, vec![]);
        assert!(matches!(behavior_value(&empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn normalized_score_pins_anchors_to_0_and_100() {
        let anchors = ScoreAnchors { random: 2.0, expert: 12.0 };
        assert_eq!(anchors.normalized(2.0).unwrap(), 0.0);
        assert_eq!(anchors.normalized(12.0).unwrap(), 100.0);
        assert_eq!(anchors.normalized(7.0).unwrap(), 50.0);
        let degenerate = ScoreAnchors { random: 3.0, expert: 3.0 };
        assert!(matches!(degenerate.normalized(5.0), Err(Error::DegenerateAnchors { .. })));
    }

    #[test]
    fn score_anchors_separate_random_play_from_planned_play() {
        let mut env = ToyEnv::make("chain-4", RewardMode::Dense).unwrap();
        assert_eq!(default_anchor_bins(&env), vec![16, 9]);
        let a = score_anchors(&mut env, 20, 7).unwrap();
        assert!(a.expert > a.random, "expert {} <= random {}", a.expert, a.random);
        assert_eq!(a.normalized(a.expert).unwrap(), 100.0);

        let maze = ToyEnv::make("umaze", RewardMode::Sparse).unwrap();
        assert_eq!(default_anchor_bins(&maze), vec![22, 10, 5, 5]);
    }
}
